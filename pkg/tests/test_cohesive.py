import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose

from meningefem.cohesive import (CohesiveLaw, CohesiveLawError, CohesivePoints, CohesiveState,
                                 dissipated_energy, initiation_index, update, update_points, with_strengths)

TABLE3 = {"S1": (3.0e3, 2.1e3, 0.48), "S2": (3.4e3, 1.9e3, 0.54), "S3": (2.8e3, 1.8e3, 0.7)}


def drive(law, direction, stop, n=4000):
    """Proportional path from zero to ``stop`` (m); returns separations, tractions and the final state."""
    d = np.asarray(direction, float) / np.linalg.norm(direction)
    seps = np.linspace(0.0, stop, n)[:, None] * d
    state = CohesiveState()
    trs = []
    for s in seps:
        t, state = update(state, s, law)
        trs.append(t)
    return seps, np.array(trs), state


def path_work(seps, trs):
    ds = np.diff(seps, axis=0)
    return float(np.sum(0.5 * (trs[1:] + trs[:-1]) * ds))


class TestElastic:
    def test_elastic_branch(self):
        law = CohesiveLaw(*TABLE3["S1"])
        t, s = update(CohesiveState(), [1e-5, 2e-5, -1e-5], law)
        assert_allclose(t, [61e3 * 1e-2, 11e3 * 2e-2, -11e3 * 1e-2])
        assert s.damage == 0.0 and not s.initiated

    def test_compression_never_initiates(self):
        law = CohesiveLaw(*TABLE3["S1"])
        t, s = update(CohesiveState(), [-1e-3, 0.0, 0.0], law)
        assert not s.initiated
        assert t[0] == pytest.approx(-61e3)

    def test_compression_undegraded_after_failure(self):
        law = CohesiveLaw(*TABLE3["S1"])
        _, _, state = drive(law, [0, 1, 0], 2e-3)
        assert state.damage == 1.0
        t, _ = update(state, [-1e-4, 0, 0], law)
        assert t[0] == pytest.approx(-61e3 * 0.1)
        t, _ = update(state, [1e-4, 1e-4, 0], law)
        assert_allclose(t, 0.0)

    def test_unloading_is_secant(self):
        law = CohesiveLaw(*TABLE3["S1"])
        d_i = 2.1e3 * 1e-3 / 11e3
        _, state = update(CohesiveState(), [0, 1.5 * d_i, 0], law)
        t_half, s2 = update(state, [0, 0.75 * d_i, 0], law)
        t_full, _ = update(state, [0, 1.5 * d_i, 0], law)
        assert t_half[1] == pytest.approx(0.5 * t_full[1], rel=1e-12)
        assert s2.damage == state.damage

    def test_inadmissible_G(self):
        law = CohesiveLaw(3.0e3, 2.1e3, 0.1)
        with pytest.raises(CohesiveLawError) as exc:
            drive(law, [0, 1, 0], 1e-3, n=200)
        assert exc.value.min_G == pytest.approx(2.1e3**2 * 1e-3 / (2 * 11e3), rel=1e-2)

    @pytest.mark.parametrize("field,value", [("tn0", 0.0), ("G", -1.0), ("T0", 0.0), ("Enn", np.inf)])
    def test_invalid_constants(self, field, value):
        kw = dict(tn0=3e3, ts0=2e3, G=0.5)
        kw[field] = value
        with pytest.raises(CohesiveLawError):
            CohesiveLaw(**kw)

    def test_isotropic_shear_enforced(self):
        with pytest.raises(CohesiveLawError):
            CohesiveLaw(3e3, 2e3, 0.5, tt0=1e3)

    def test_record_round_trip(self):
        law = CohesiveLaw(*TABLE3["S2"])
        assert CohesiveLaw.from_record(law.to_record("x")) == law

    def test_with_strengths(self):
        law = with_strengths(CohesiveLaw(*TABLE3["S1"]), 1e3, 2e3, 0.9)
        assert (law.tn0, law.ts0, law.tt0, law.G, law.Enn) == (1e3, 2e3, 2e3, 0.9, 61e3)


class TestInitiation:
    @pytest.mark.parametrize("name", list(TABLE3))
    def test_index_one_at_strengths(self, name):
        law = CohesiveLaw(*TABLE3[name])
        assert initiation_index([law.tn0, 0, 0], law) == 1.0
        assert initiation_index([0, law.ts0, 0], law) == 1.0
        assert initiation_index([0, 0, -law.tt0], law) == 1.0

    def test_compressive_normal_ignored(self):
        law = CohesiveLaw(*TABLE3["S1"])
        assert initiation_index([-1e9, 0, 0], law) == 0.0


class TestDissipation:
    @pytest.mark.parametrize("name", list(TABLE3))
    @pytest.mark.parametrize("direction", [(1, 0, 0), (0, 1, 0), (0, 0, 1), (1, 1, 0), (1, 0.3, -0.6)])
    def test_work_to_failure_equals_G(self, name, direction):
        law = CohesiveLaw(*TABLE3[name])
        seps, trs, state = drive(law, direction, 3e-3)
        assert state.damage == 1.0
        assert path_work(seps, trs) == pytest.approx(law.G, rel=2e-3)
        assert dissipated_energy(state) == pytest.approx(law.G, rel=1e-12)

    @given(st.floats(0.05, 1.0), st.floats(-1.0, 1.0), st.floats(-1.0, 1.0), st.floats(0.0, 1.0))
    def test_damage_monotone_and_bounded(self, a, b, c, frac):
        law = CohesiveLaw(*TABLE3["S3"])
        d = np.array([a, b, c])
        pts = CohesivePoints(1)
        last = 0.0
        for s in np.concatenate([np.linspace(0, 2e-3, 60), np.linspace(2e-3, frac * 2e-3, 30)]):
            update_points(pts, (s * d / np.linalg.norm(d))[None], law)
            assert last <= pts.damage[0] <= 1.0
            last = pts.damage[0]

    def test_stored_energy_is_elastic(self):
        law = CohesiveLaw(*TABLE3["S1"])
        sep = np.array([[1e-5, 5e-5, 0.0]])
        _, stored = update_points(CohesivePoints(1), sep, law)
        expect = 0.5 * (61e3 * 1e-5**2 + 11e3 * 5e-5**2) / 1e-3
        assert stored[0] == pytest.approx(expect, rel=1e-12)

    def test_vector_and_scalar_agree(self):
        law = CohesiveLaw(*TABLE3["S2"])
        rng = np.random.default_rng(1)
        ends = rng.uniform(-4e-4, 4e-4, (20, 3))
        pts = CohesivePoints(20)
        states = [CohesiveState() for _ in ends]
        # Ramp gradually so each point initiates close to its true onset.
        for s in np.linspace(0.0, 1.0, 200)[1:]:
            trv, _ = update_points(pts, s * ends, law)
            for i, sep in enumerate(s * ends):
                t, states[i] = update(states[i], sep, law)
                assert_allclose(t, trv[i], rtol=1e-13, atol=1e-12)
        assert [st_.damage for st_ in states] == pts.damage.tolist()
        assert pts.damage.max() > 0.0
