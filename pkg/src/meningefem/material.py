"""Second-order Ogden hyperelasticity for brain tissue, plus the rigid tag.

Strain energy per unit reference volume::

    W = sum_i 2 mu_i / alpha_i**2 * (l1**a_i + l2**a_i + l3**a_i - 3)
        + sum_i (J - 1)**(2 i) / D_i

where ``l*`` are the deviatoric principal stretches ``J**(-1/3) * lambda``.
All functions accept a single 3x3 deformation gradient or a stack of shape
``(..., 3, 3)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

__all__ = [
    "OgdenParams",
    "Material",
    "DeformationState",
    "MaterialError",
    "d1_from_poisson",
    "initial_moduli",
    "strain_energy",
    "cauchy_stress",
    "first_piola",
    "principal_kirchhoff",
    "TABLE2_ALPHA",
]

TABLE2_ALPHA = (-8.0, 16.0)
DEFAULT_POISSON = 0.49
DEFAULT_DENSITY = 1000.0


class MaterialError(ValueError):
    """Invalid material constants or a deformation outside the admissible range."""


@dataclass(frozen=True)
class OgdenParams:
    """Constants of the N=2 Ogden model. ``D[1] == 0`` drops the quartic volumetric term."""

    mu: tuple[float, float]
    alpha: tuple[float, float]
    D: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "mu", tuple(float(m) for m in self.mu))
        object.__setattr__(self, "alpha", tuple(float(a) for a in self.alpha))
        object.__setattr__(self, "D", tuple(float(d) for d in self.D))
        if len(self.mu) != 2 or len(self.alpha) != 2 or len(self.D) != 2:
            raise MaterialError("second-order Ogden model needs exactly two mu, alpha and D")
        if not sum(self.mu) > 0.0:
            raise MaterialError(f"initial shear modulus mu1+mu2 must be positive, got {sum(self.mu)}")
        if any(a == 0.0 for a in self.alpha):
            raise MaterialError("Ogden exponents alpha_i must be non-zero")
        if not self.D[0] > 0.0:
            raise MaterialError(f"D1 must be positive, got {self.D[0]}")
        if self.D[1] < 0.0:
            raise MaterialError(f"D2 must be non-negative, got {self.D[1]}")

    @classmethod
    def from_poisson(cls, mu, alpha=TABLE2_ALPHA, nu=DEFAULT_POISSON) -> "OgdenParams":
        """Build parameters with D1 set from Poisson's ratio and D2 = 0."""
        return cls(tuple(mu), tuple(alpha), (d1_from_poisson(float(sum(mu)), nu), 0.0))

    @property
    def mu0(self) -> float:
        return self.mu[0] + self.mu[1]

    @property
    def K0(self) -> float:
        return 2.0 / self.D[0]


@dataclass(frozen=True)
class Material:
    """A named material record: either ``ogden2`` tissue or a ``rigid`` tag."""

    name: str
    model: str = "ogden2"
    params: OgdenParams | None = None
    density: float = DEFAULT_DENSITY
    extra: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.model not in ("ogden2", "rigid"):
            raise MaterialError(f"material {self.name!r}: unknown model {self.model!r}")
        if self.model == "ogden2" and self.params is None:
            raise MaterialError(f"material {self.name!r}: ogden2 needs parameters")
        if not self.density > 0.0:
            raise MaterialError(f"material {self.name!r}: density must be positive")

    @property
    def rigid(self) -> bool:
        return self.model == "rigid"

    @classmethod
    def from_record(cls, record: Mapping[str, Any], name: str | None = None) -> "Material":
        name = record.get("name", name)
        if name is None:
            raise MaterialError("material record without a name")
        model = record.get("model", "ogden2")
        density = float(record.get("density", DEFAULT_DENSITY))
        if model == "rigid":
            return cls(name, "rigid", None, density)
        mu = record["mu"]
        alpha = record.get("alpha", TABLE2_ALPHA)
        if "D" in record:
            D = list(record["D"]) + [0.0] * (2 - len(record["D"]))
            params = OgdenParams(mu, alpha, D)
        else:
            params = OgdenParams.from_poisson(mu, alpha, float(record.get("nu", DEFAULT_POISSON)))
        return cls(name, model, params, density)

    def to_record(self) -> dict:
        rec: dict[str, Any] = {"name": self.name, "model": self.model, "density": self.density}
        if self.params is not None:
            rec["mu"] = list(self.params.mu)
            rec["alpha"] = list(self.params.alpha)
            rec["D"] = list(self.params.D)
        return rec


def d1_from_poisson(mu0: float, nu: float) -> float:
    """Compressibility constant D1 = 2/K0 from the isotropic relation for K0."""
    if not 0.0 <= nu < 0.5:
        raise MaterialError(f"Poisson's ratio must lie in [0, 0.5), got {nu} (incompressible limit)")
    if not mu0 > 0.0:
        raise MaterialError(f"initial shear modulus must be positive, got {mu0}")
    K0 = 2.0 * mu0 * (1.0 + nu) / (3.0 * (1.0 - 2.0 * nu))
    return 2.0 / K0


def initial_moduli(p: OgdenParams) -> dict[str, float]:
    return {"mu0": p.mu0, "K0": p.K0}


@dataclass(frozen=True)
class DeformationState:
    """Deformation gradient with its volume ratio and deviatoric principal stretches."""

    F: np.ndarray

    def __post_init__(self):
        F = np.asarray(self.F, dtype=float)
        if F.shape != (3, 3):
            raise MaterialError(f"deformation gradient must be 3x3, got shape {F.shape}")
        if not np.linalg.det(F) > 0.0:
            raise MaterialError("deformation gradient has non-positive determinant")
        object.__setattr__(self, "F", F)

    @property
    def J(self) -> float:
        return float(np.linalg.det(self.F))

    @property
    def stretches(self) -> np.ndarray:
        return np.sqrt(np.linalg.eigvalsh(self.F.T @ self.F))

    @property
    def deviatoric_stretches(self) -> np.ndarray:
        return self.J ** (-1.0 / 3.0) * self.stretches


def _as_F(F) -> np.ndarray:
    if isinstance(F, DeformationState):
        return F.F
    return np.asarray(F, dtype=float)


def _spectral(F: np.ndarray):
    """Volume ratio, deviatoric principal stretches and Lagrangian principal axes."""
    J = np.linalg.det(F)
    if np.any(~(J > 0.0)):
        raise MaterialError("deformation gradient has non-positive determinant")
    C = np.swapaxes(F, -1, -2) @ F
    lam2, N = np.linalg.eigh(C)
    lam = np.sqrt(np.maximum(lam2, 0.0))
    lbar = lam * J[..., None] ** (-1.0 / 3.0)
    return J, lam, lbar, N


def _checked(x: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise MaterialError(f"non-finite {what}: stretches or exponents out of numeric range")
    return x


def _volumetric_energy(J, D):
    U = np.zeros_like(J)
    for i, Di in enumerate(D, start=1):
        if Di > 0.0:
            U = U + (J - 1.0) ** (2 * i) / Di
    return U


def _pressure(J, D):
    p = np.zeros_like(J)
    for i, Di in enumerate(D, start=1):
        if Di > 0.0:
            p = p + 2.0 * i / Di * (J - 1.0) ** (2 * i - 1)
    return p


def strain_energy(F, p: OgdenParams):
    """Strain energy per unit reference volume (Pa)."""
    F = _as_F(F)
    J, _, lbar, _ = _spectral(F)
    W = _volumetric_energy(J, p.D)
    for mu, a in zip(p.mu, p.alpha):
        W = W + 2.0 * mu / a**2 * (np.sum(lbar**a, axis=-1) - 3.0)
    W = _checked(W, "strain energy")
    return float(W) if W.ndim == 0 else W


def principal_kirchhoff(J, lbar, p: OgdenParams) -> np.ndarray:
    """Principal Kirchhoff stresses for given volume ratio and deviatoric stretches."""
    tau = np.zeros_like(lbar)
    for mu, a in zip(p.mu, p.alpha):
        la = lbar**a
        tau = tau + 2.0 * mu / a * (la - la.mean(axis=-1, keepdims=True))
    tau = tau + (J * _pressure(J, p.D))[..., None]
    return _checked(tau, "stress")


def first_piola(F, p: OgdenParams) -> np.ndarray:
    """First Piola-Kirchhoff stress P = F S with S assembled in the Lagrangian principal frame."""
    F = _as_F(F)
    J, lam, lbar, N = _spectral(F)
    tau = principal_kirchhoff(J, lbar, p)
    s = tau / lam**2
    S = np.einsum("...ia,...a,...ja->...ij", N, s, N)
    return F @ S


def cauchy_stress(F, p: OgdenParams) -> np.ndarray:
    """Symmetric Cauchy stress sigma = tau / J, built from principal Kirchhoff stresses."""
    F = _as_F(F)
    J, lam, lbar, N = _spectral(F)
    tau = principal_kirchhoff(J, lbar, p)
    # Eulerian axes n_a = F N_a / lambda_a; repeated stretches need no special care here.
    n = (F @ N) / lam[..., None, :]
    sigma = np.einsum("...ia,...a,...ja->...ij", n, tau / J[..., None], n)
    return 0.5 * (sigma + np.swapaxes(sigma, -1, -2))
