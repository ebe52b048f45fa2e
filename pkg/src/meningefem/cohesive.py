"""Traction-separation law for the brain-skull interface.

Uncoupled linear elasticity on nominal strains, maximum nominal stress ratio
for initiation, and linear softening sized by the fracture energy ``G``.
The scalar API (:func:`update`) wraps a vectorised kernel
(:func:`update_points`) that the solver calls on every integration point.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Any, Mapping, NamedTuple

import numpy as np

__all__ = [
    "CohesiveLaw",
    "CohesiveState",
    "CohesivePoints",
    "CohesiveLawError",
    "LawArrays",
    "nominal_strains",
    "elastic_traction",
    "initiation_index",
    "update",
    "update_points",
    "dissipated_energy",
    "with_strengths",
    "DEFAULT_T0",
    "ENN_LITERATURE",
    "ESS_LITERATURE",
]

ENN_LITERATURE = 61e3
ESS_LITERATURE = 11e3
DEFAULT_T0 = 1.0e-3


class CohesiveLawError(ValueError):
    """Inadmissible cohesive law, e.g. a fracture energy too small for the elastic branch."""

    def __init__(self, message: str, min_G: float | None = None):
        self.min_G = min_G
        super().__init__(message)


@dataclass(frozen=True)
class CohesiveLaw:
    """Moduli and strengths in Pa, ``G`` in N/m, constitutive thickness ``T0`` in m."""

    tn0: float
    ts0: float
    G: float
    tt0: float | None = None
    Enn: float = ENN_LITERATURE
    Ess: float = ESS_LITERATURE
    Ett: float = ESS_LITERATURE
    T0: float = DEFAULT_T0
    isotropic_shear: bool = True

    def __post_init__(self):
        if self.tt0 is None:
            object.__setattr__(self, "tt0", self.ts0)
        for name in ("Enn", "Ess", "Ett", "tn0", "ts0", "tt0", "G", "T0"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0.0):
                raise CohesiveLawError(f"cohesive {name} must be positive and finite, got {value}")
            object.__setattr__(self, name, float(value))
        if self.isotropic_shear and self.ts0 != self.tt0:
            raise CohesiveLawError(f"isotropic shear requires ts0 == tt0, got {self.ts0} and {self.tt0}")

    @classmethod
    def from_record(cls, record: Mapping[str, Any]) -> "CohesiveLaw":
        return cls(
            tn0=record["tn0_Pa"],
            ts0=record["ts0_Pa"],
            tt0=record.get("tt0_Pa", record["ts0_Pa"]),
            G=record["G_N_per_m"],
            Enn=record.get("Enn_Pa", ENN_LITERATURE),
            Ess=record.get("Ess_Pa", ESS_LITERATURE),
            Ett=record.get("Ett_Pa", record.get("Ess_Pa", ESS_LITERATURE)),
            T0=record.get("T0_m", DEFAULT_T0),
            isotropic_shear=record.get("isotropic_shear", True),
        )

    def to_record(self, name: str | None = None) -> dict:
        rec = {
            "Enn_Pa": self.Enn, "Ess_Pa": self.Ess, "Ett_Pa": self.Ett,
            "tn0_Pa": self.tn0, "ts0_Pa": self.ts0, "tt0_Pa": self.tt0,
            "G_N_per_m": self.G, "T0_m": self.T0,
        }
        if name is not None:
            rec = {"name": name, **rec}
        return rec


class LawArrays(NamedTuple):
    """Per-point law constants, duck-compatible with :class:`CohesiveLaw`."""

    Enn: np.ndarray
    Ess: np.ndarray
    Ett: np.ndarray
    tn0: np.ndarray
    ts0: np.ndarray
    tt0: np.ndarray
    G: np.ndarray
    T0: np.ndarray

    @classmethod
    def stack(cls, laws: list[CohesiveLaw], index: np.ndarray) -> "LawArrays":
        index = np.asarray(index)
        return cls(*(np.array([getattr(l, f) for l in laws])[index] for f in cls._fields))


@dataclass(frozen=True)
class CohesiveState:
    """Damage history of one integration point."""

    damage: float = 0.0
    delta_max: float = 0.0
    delta_init: float = 0.0
    initiated: bool = False
    dissipated: float = 0.0
    delta_fail: float = 0.0


class CohesivePoints:
    """Mutable damage history for ``n`` integration points, owned by one solver."""

    def __init__(self, n: int):
        self.damage = np.zeros(n)
        self.delta_max = np.zeros(n)
        self.delta_init = np.zeros(n)
        self.delta_fail = np.zeros(n)
        self.initiated = np.zeros(n, dtype=bool)
        self.dissipated = np.zeros(n)

    def __len__(self):
        return len(self.damage)

    def copy(self) -> "CohesivePoints":
        out = CohesivePoints(0)
        for k, v in vars(self).items():
            setattr(out, k, v.copy())
        return out

    @classmethod
    def from_state(cls, s: CohesiveState) -> "CohesivePoints":
        pts = cls(1)
        pts.damage[0], pts.delta_max[0], pts.delta_init[0] = s.damage, s.delta_max, s.delta_init
        pts.delta_fail[0], pts.initiated[0], pts.dissipated[0] = s.delta_fail, s.initiated, s.dissipated
        return pts

    def state(self, i: int = 0) -> CohesiveState:
        return CohesiveState(float(self.damage[i]), float(self.delta_max[i]), float(self.delta_init[i]),
                             bool(self.initiated[i]), float(self.dissipated[i]), float(self.delta_fail[i]))


def nominal_strains(separation, T0: float) -> np.ndarray:
    if not T0 > 0.0:
        raise CohesiveLawError(f"constitutive thickness must be positive, got {T0}")
    return np.asarray(separation, dtype=float) / T0


def elastic_traction(strains, law) -> np.ndarray:
    e = np.asarray(strains, dtype=float)
    return np.stack([law.Enn * e[..., 0], law.Ess * e[..., 1], law.Ett * e[..., 2]], axis=-1)


def initiation_index(traction, law) -> np.ndarray | float:
    """Maximum nominal stress ratio; compression in the normal direction never counts."""
    t = np.asarray(traction, dtype=float)
    f = np.maximum.reduce([np.maximum(t[..., 0], 0.0) / law.tn0,
                           np.abs(t[..., 1]) / law.ts0,
                           np.abs(t[..., 2]) / law.tt0])
    return float(f) if np.ndim(f) == 0 else f


def update_points(points: CohesivePoints, separation: np.ndarray, law) -> tuple[np.ndarray, np.ndarray]:
    """Advance every point to ``separation`` (shape (n, 3): normal, s, t) in place.

    Returns the transmitted tractions (n, 3) and the recoverable energy per
    unit area (n,). Raises :class:`CohesiveLawError` if a point initiates
    with a fracture energy below ``t_eff0 * delta_init / 2``.
    """
    sep = np.asarray(separation, dtype=float).reshape(-1, 3)
    dn, ds, dt = sep[:, 0], sep[:, 1], sep[:, 2]
    dn_pos = np.maximum(dn, 0.0)
    dn_neg = np.minimum(dn, 0.0)
    T0 = law.T0
    trial = np.stack([law.Enn * dn / T0, law.Ess * ds / T0, law.Ett * dt / T0], axis=-1)
    # Damageable elastic energy per area (compression excluded).
    psi0 = 0.5 * (law.Enn * dn_pos**2 + law.Ess * ds**2 + law.Ett * dt**2) / T0
    delta_m = np.sqrt(dn_pos**2 + ds**2 + dt**2)
    np.maximum(points.delta_max, delta_m, out=points.delta_max)

    fresh = ~points.initiated
    if fresh.any():
        f = initiation_index(trial, law)
        start = fresh & (np.atleast_1d(f) >= 1.0)
        if start.any():
            d_init = delta_m[start]
            # Work-conjugate effective traction: equals |t| on pure-mode paths.
            t_eff0 = 2.0 * psi0[start] / d_init
            G = np.broadcast_to(law.G, delta_m.shape)[start]
            d_fail = 2.0 * G / t_eff0
            bad = d_fail <= d_init
            if bad.any():
                min_G = float(np.max((t_eff0 * d_init / 2.0)[bad]))
                raise CohesiveLawError(
                    f"fracture energy too small for the elastic branch; minimum admissible G = {min_G:.6g} N/m",
                    min_G=min_G)
            points.initiated[start] = True
            points.delta_init[start] = d_init
            points.delta_fail[start] = d_fail
            points.delta_max[start] = d_init

    on = points.initiated
    if on.any():
        dmax, di, df = points.delta_max[on], points.delta_init[on], points.delta_fail[on]
        D = np.clip(df * (dmax - di) / (dmax * (df - di)), 0.0, 1.0)
        np.maximum(points.damage[on], D, out=D)
        points.damage[on] = D
        G = np.broadcast_to(law.G, points.damage.shape)[on]
        points.dissipated[on] = G * np.clip((dmax - di) / (df - di), 0.0, 1.0)

    keep = 1.0 - points.damage
    traction = trial * keep[:, None]
    # Compressive normal traction is never degraded.
    compress = dn < 0.0
    traction[compress, 0] = trial[compress, 0]
    stored = keep * psi0 + 0.5 * law.Enn * dn_neg**2 / T0
    return traction, stored


def update(state: CohesiveState, separation, law: CohesiveLaw) -> tuple[np.ndarray, CohesiveState]:
    """Single-point update: returns ``(traction, new_state)``; ``state`` is left untouched."""
    pts = CohesivePoints.from_state(state)
    traction, _ = update_points(pts, np.asarray(separation, dtype=float).reshape(1, 3), law)
    return traction[0], pts.state(0)


def dissipated_energy(state: CohesiveState | CohesivePoints) -> float | np.ndarray:
    if isinstance(state, CohesivePoints):
        return state.dissipated.copy()
    return state.dissipated


def with_strengths(law: CohesiveLaw, tn0: float, ts0: float, G: float) -> CohesiveLaw:
    return replace(law, tn0=tn0, ts0=ts0, tt0=ts0, G=G)
