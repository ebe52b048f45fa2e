import numpy as np
import pytest
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose

from meningefem.material import (Material, MaterialError, OgdenParams, DeformationState, cauchy_stress,
                                 d1_from_poisson, first_piola, principal_kirchhoff, strain_energy)

B1 = OgdenParams.from_poisson((800.0, 386.7))


def energy_oracle(F, mu, alpha, D):
    """Ogden energy from singular values; shares no code with the package."""
    lam = np.linalg.svd(F, compute_uv=False)
    J = np.prod(lam)
    lb = lam / np.cbrt(J)
    W = sum(2 * m / a**2 * (np.sum(lb**a) - 3) for m, a in zip(mu, alpha))
    return W + sum((J - 1) ** (2 * i) / d for i, d in enumerate(D, start=1) if d > 0)


def random_F(rng, spread=0.15, jrange=(0.9, 1.1)):
    F = np.eye(3) + spread * rng.uniform(-1, 1, (3, 3))
    J = rng.uniform(*jrange)
    return F * np.cbrt(J / np.linalg.det(F))


def rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    return q if np.linalg.det(q) > 0 else -q


class TestParams:
    def test_mu0_is_sum(self):
        assert OgdenParams.from_poisson((1210.8, 466.4)).mu0 == 1210.8 + 466.4

    def test_bulk_modulus_from_poisson(self):
        p = OgdenParams.from_poisson((800.0, 386.7), nu=0.45)
        K = 2 * 1186.7 * 1.45 / (3 * 0.1)
        assert p.K0 == pytest.approx(K, rel=1e-12)

    @pytest.mark.parametrize("nu", [0.5, 0.6, -0.1])
    def test_poisson_out_of_range(self, nu):
        with pytest.raises(MaterialError, match="Poisson"):
            d1_from_poisson(1000.0, nu)

    def test_zero_alpha_rejected(self):
        with pytest.raises(MaterialError, match="non-zero"):
            OgdenParams((800.0, 386.7), (0.0, 16.0), (1e-5, 0.0))

    def test_nonpositive_mu0_rejected(self):
        with pytest.raises(MaterialError, match="positive"):
            OgdenParams((-500.0, 100.0), (-8.0, 16.0), (1e-5, 0.0))

    def test_record_round_trip(self):
        m = Material("brain", params=B1, density=1040.0)
        back = Material.from_record(m.to_record())
        assert back == m

    def test_record_from_poisson(self):
        m = Material.from_record({"name": "x", "mu": [800.0, 386.7], "nu": 0.49})
        assert m.params.D[0] == pytest.approx(B1.D[0], rel=1e-15)

    def test_rigid_record(self):
        assert Material.from_record({"name": "skull", "model": "rigid"}).rigid


class TestStress:
    def test_zero_at_identity(self):
        assert_allclose(cauchy_stress(np.eye(3), B1), 0.0, atol=1e-12)
        assert strain_energy(np.eye(3), B1) == pytest.approx(0.0, abs=1e-12)

    def test_energy_matches_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            F = random_F(rng)
            assert strain_energy(F, B1) == pytest.approx(energy_oracle(F, B1.mu, B1.alpha, B1.D), rel=1e-11)

    def test_simple_shear_small_strain_modulus(self):
        g = 1e-5
        F = np.eye(3)
        F[0, 1] = g
        assert cauchy_stress(F, B1)[0, 1] / g == pytest.approx(B1.mu0, rel=1e-4)

    def test_uniaxial_is_diagonal(self):
        F = np.diag([1.2, 0.93, 0.93])
        s = cauchy_stress(F, B1)
        assert_allclose(s - np.diag(np.diag(s)), 0.0, atol=1e-9)
        assert s[1, 1] == pytest.approx(s[2, 2], rel=1e-12)

    def test_repeated_stretches(self):
        # Equal principal stretches: only pressure, no spurious shear.
        s = cauchy_stress(1.02 * np.eye(3), B1)
        assert_allclose(s, s[0, 0] * np.eye(3), atol=1e-8)

    def test_piola_consistent_with_cauchy(self):
        rng = np.random.default_rng(5)
        F = random_F(rng)
        P = first_piola(F, B1)
        assert_allclose(P @ F.T / np.linalg.det(F), cauchy_stress(F, B1), rtol=1e-10, atol=1e-9)

    def test_kirchhoff_deviatoric_part_traceless(self):
        lbar = np.array([1.1, 0.95, 1 / (1.1 * 0.95)])
        tau = principal_kirchhoff(1.0, lbar, B1)
        assert abs(tau.sum()) < 1e-9 * np.abs(tau).max()

    def test_inverted_state_rejected(self):
        with pytest.raises(MaterialError):
            cauchy_stress(np.diag([1.0, 1.0, -1.0]), B1)
        with pytest.raises(MaterialError):
            DeformationState(np.diag([1.0, 1.0, -1.0]))

    def test_overflow_reported(self):
        with pytest.raises(MaterialError, match="non-finite"):
            strain_energy(np.diag([1e3, 1e-3, 1.0]), OgdenParams((800.0, 386.7), (-80.0, 160.0), (1e-5, 0.0)))

    def test_vectorised_matches_scalar(self):
        rng = np.random.default_rng(9)
        Fs = np.stack([random_F(rng) for _ in range(5)])
        batch = cauchy_stress(Fs, B1)
        for F, s in zip(Fs, batch):
            assert_allclose(s, cauchy_stress(F, B1), rtol=1e-13, atol=1e-10)


class TestInvariants:
    @given(st.integers(0, 2**32 - 1))
    def test_frame_indifference(self, seed):
        rng = np.random.default_rng(seed)
        F = random_F(rng)
        R = rotation(rng)
        lhs = cauchy_stress(R @ F, B1)
        rhs = R @ cauchy_stress(F, B1) @ R.T
        assert np.linalg.norm(lhs - rhs) <= 1e-10 * max(np.linalg.norm(rhs), 1.0)

    @given(st.integers(0, 2**32 - 1))
    def test_symmetry(self, seed):
        s = cauchy_stress(random_F(np.random.default_rng(seed)), B1)
        assert_allclose(s, s.T, atol=1e-12 * max(np.abs(s).max(), 1.0))

    @given(st.integers(0, 2**32 - 1))
    def test_energy_nonnegative(self, seed):
        assert strain_energy(random_F(np.random.default_rng(seed), spread=0.3), B1) >= -1e-12

    @given(st.floats(0.01, 0.2), st.integers(0, 2**32 - 1))
    def test_pressure_sign(self, eps, seed):
        # Pure dilatation gives tension, pure compression gives pressure.
        assert np.trace(cauchy_stress((1 + eps) * np.eye(3), B1)) > 0
        assert np.trace(cauchy_stress((1 - eps) * np.eye(3), B1)) < 0
