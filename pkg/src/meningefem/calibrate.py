"""Inverse identification of tissue and interface constants from shear curves.

The objective is the L1 distance between simulated and target forces on the
target's displacement grid. The default minimiser is a box-constrained SQP
(BFGS model, exact bounded QP step, Armijo backtracking) working in
coordinates normalised to the unit box, with forward-difference gradients
whose evaluations may run in parallel. SciPy's SLSQP is available as an
alternative route and a bounded Nelder-Mead search as a derivative-free
fallback.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import Executor, ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from scipy import linalg as slinalg
from scipy import optimize as sopt

from .cohesive import CohesiveLaw, CohesiveLawError, with_strengths
from .material import DEFAULT_POISSON, TABLE2_ALPHA, Material, MaterialError, OgdenParams
from .mesh import Mesh, deformable_height
from .solver import ForceDisplacementCurve, SimulationConfig, SolverError, run

log = logging.getLogger(__name__)

__all__ = [
    "FreeParameter",
    "CalibrationProblem",
    "CalibrationResult",
    "CalibrationInfeasibleError",
    "TissueForward",
    "InterfaceForward",
    "objective",
    "optimize",
    "calibrate_tissue",
    "calibrate_interface",
    "synthesize_target",
    "resample",
    "peak_force_error_pct",
    "PENALTY_FACTOR",
]

PENALTY_FACTOR = 1.0e6


class CalibrationInfeasibleError(RuntimeError):
    """Every evaluated point failed in the forward model."""


@dataclass(frozen=True)
class FreeParameter:
    name: str
    lower: float
    upper: float
    initial: float

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper) and self.lower < self.upper):
            raise ValueError(f"parameter {self.name!r}: bounds must be finite with lower < upper")
        if not self.lower <= self.initial <= self.upper:
            raise ValueError(f"parameter {self.name!r}: initial value {self.initial} outside "
                             f"[{self.lower}, {self.upper}]")

    def to_unit(self, value: float) -> float:
        return (value - self.lower) / (self.upper - self.lower)

    def from_unit(self, z: float) -> float:
        z = min(max(float(z), 0.0), 1.0)
        return min(max(self.lower + z * (self.upper - self.lower), self.lower), self.upper)


Forward = Callable[[Mapping[str, float]], ForceDisplacementCurve]


@dataclass
class CalibrationProblem:
    """Free parameters, target curve, forward model and displacement window of the fit.

    ``forward`` receives the merged free and fixed parameters and returns a
    simulated curve. ``force_scale`` sets the penalty for failed runs
    (default: the target's peak absolute force).

    ``measure`` selects what is compared sample by sample: ``"force"`` (the
    calibration objective) or ``"work"``, the running integral of force over
    displacement from the window start. A shift of a sharp force drop changes
    the work misfit continuously, which makes it a useful prefit merit.
    """

    free_parameters: Sequence[FreeParameter]
    target: ForceDisplacementCurve
    forward: Forward
    fit_window: tuple[float, float] | None = None
    fixed_parameters: Mapping[str, float] = field(default_factory=dict)
    force_scale: float | None = None
    measure: str = "force"

    def __post_init__(self):
        if self.measure not in ("force", "work"):
            raise ValueError(f"unknown misfit measure {self.measure!r}")
        self.free_parameters = tuple(self.free_parameters)
        if not self.free_parameters:
            raise ValueError("calibration needs at least one free parameter")
        names = [p.name for p in self.free_parameters]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate free parameter names: {names}")
        clash = set(names) & set(self.fixed_parameters)
        if clash:
            raise ValueError(f"parameters both free and fixed: {sorted(clash)}")
        d = self.target.displacement
        if len(d) == 0:
            raise ValueError("empty target curve")
        if self.fit_window is None:
            self.fit_window = (float(d.min()), float(d.max()))
        lo, hi = self.fit_window
        tol = 1e-12 * max(abs(d.max()), 1.0)
        if not (lo <= hi and lo >= d.min() - tol and hi <= d.max() + tol):
            raise ValueError(f"fit window [{lo}, {hi}] outside the target range [{d.min()}, {d.max()}]")
        if not self.window_mask.any():
            raise ValueError("fit window contains no target samples")
        if self.force_scale is None:
            peak = float(np.max(np.abs(self.target.force)))
            self.force_scale = peak if peak > 0.0 else 1.0

    @property
    def window_mask(self) -> np.ndarray:
        lo, hi = self.fit_window
        d = self.target.displacement
        return (d >= lo) & (d <= hi)

    @property
    def n_samples(self) -> int:
        return int(self.window_mask.sum())

    @property
    def penalty(self) -> float:
        return PENALTY_FACTOR * self.force_scale

    def measured(self, force: np.ndarray) -> np.ndarray:
        """Force samples on the window grid mapped to the compared quantity."""
        if self.measure == "force":
            return force
        d = self.target.displacement[self.window_mask]
        return np.concatenate([[0.0], np.cumsum(0.5 * (force[1:] + force[:-1]) * np.diff(d))])

    def target_l1(self) -> float:
        return float(np.sum(np.abs(self.measured(self.target.force[self.window_mask]))))

    def as_dict(self, values: Sequence[float] | Mapping[str, float]) -> dict[str, float]:
        if isinstance(values, Mapping):
            free = {p.name: float(values[p.name]) for p in self.free_parameters}
        else:
            values = np.asarray(values, dtype=float).ravel()
            if len(values) != len(self.free_parameters):
                raise ValueError(f"expected {len(self.free_parameters)} parameter values, got {len(values)}")
            free = {p.name: float(v) for p, v in zip(self.free_parameters, values)}
        return {**self.fixed_parameters, **free}

    def from_unit(self, z: Sequence[float]) -> dict[str, float]:
        return self.as_dict([p.from_unit(zi) for p, zi in zip(self.free_parameters, z)])

    def initial_unit(self) -> np.ndarray:
        return np.array([p.to_unit(p.initial) for p in self.free_parameters])


def _window_misfit(problem: CalibrationProblem, simulated: ForceDisplacementCurve) -> float:
    mask = problem.window_mask
    d = problem.target.displacement[mask]
    if len(simulated) == 0 or simulated.displacement.max() < d.max() * (1.0 - 1e-9):
        raise SolverError("simulated curve ends before the fit window")
    f_sim = simulated.interpolate(d)
    return float(np.sum(np.abs(problem.measured(f_sim) - problem.measured(problem.target.force[mask]))))


def _evaluate(problem: CalibrationProblem, params: Mapping[str, float]) -> tuple[float, bool, ForceDisplacementCurve | None]:
    """Objective value, failure flag and simulated curve for one parameter set."""
    try:
        sim = problem.forward(params)
        return _window_misfit(problem, sim), False, sim
    except (SolverError, CohesiveLawError, MaterialError) as exc:
        log.warning("forward model failed at %s: %s; returning penalty", params, exc)
        return problem.penalty, True, None


def objective(params: Sequence[float] | Mapping[str, float], problem: CalibrationProblem) -> float:
    """Sum of absolute force differences over the fit window (N * samples)."""
    values = problem.as_dict(params)
    for p in problem.free_parameters:
        if not p.lower <= values[p.name] <= p.upper:
            raise ValueError(f"parameter {p.name!r} = {values[p.name]} outside its bounds")
    return _evaluate(problem, values)[0]


def peak_force_error_pct(simulated: ForceDisplacementCurve, target: ForceDisplacementCurve,
                         window: tuple[float, float] | None = None) -> float:
    """100 * |max F_sim - max F_target| / max F_target within the window."""
    lo, hi = window if window is not None else (-np.inf, np.inf)
    tm = (target.displacement >= lo) & (target.displacement <= hi)
    sm = (simulated.displacement >= lo) & (simulated.displacement <= hi)
    f_t = float(np.max(target.force[tm]))
    f_s = float(np.max(simulated.force[sm])) if sm.any() else 0.0
    if f_t <= 0.0:
        return math.inf
    return 100.0 * abs(f_s - f_t) / f_t


@dataclass
class CalibrationResult:
    parameters: dict[str, float]
    objective_value: float
    peak_force_error_pct: float
    iterations: int
    converged: bool
    trace: list[dict[str, Any]]
    evaluations: int
    message: str = ""
    fitted_curve: ForceDisplacementCurve | None = None

    def to_dict(self) -> dict:
        return {
            "parameters": dict(self.parameters),
            "objective_value": self.objective_value,
            "peak_force_error_pct": self.peak_force_error_pct,
            "iterations": self.iterations,
            "converged": self.converged,
            "evaluations": self.evaluations,
            "message": self.message,
            "trace": self.trace,
        }


class _Evaluator:
    """Caches forward evaluations in unit coordinates and keeps the best point seen."""

    def __init__(self, problem: CalibrationProblem, executor: Executor | None):
        self.problem = problem
        self.executor = executor
        self.cache: dict[bytes, tuple[float, bool]] = {}
        self.curves: dict[bytes, ForceDisplacementCurve] = {}
        self.best_z: np.ndarray | None = None
        self.best_f = math.inf
        self.n_failed = 0

    @staticmethod
    def _key(z: np.ndarray) -> bytes:
        return np.asarray(z, dtype=float).tobytes()

    def _store(self, z, value, failed, curve):
        key = self._key(z)
        self.cache[key] = (value, failed)
        if curve is not None:
            self.curves[key] = curve
        self.n_failed += failed
        if value < self.best_f:
            self.best_f, self.best_z = value, np.array(z, dtype=float)

    def many(self, zs: list[np.ndarray]) -> list[float]:
        zs = [np.clip(np.asarray(z, dtype=float), 0.0, 1.0) for z in zs]
        todo = []
        for z in zs:
            key = self._key(z)
            if key not in self.cache and all(self._key(t) != key for t in todo):
                todo.append(z)
        params = [self.problem.from_unit(z) for z in todo]
        if self.executor is not None and len(todo) > 1:
            outs = list(self.executor.map(_evaluate, [self.problem] * len(todo), params))
        else:
            outs = [_evaluate(self.problem, p) for p in params]
        # Results are stored in submission order so the run does not depend on completion order.
        for z, (value, failed, curve) in zip(todo, outs):
            self._store(z, value, failed, curve)
        return [self.cache[self._key(z)][0] for z in zs]

    def __call__(self, z) -> float:
        return self.many([z])[0]

    @property
    def evaluations(self) -> int:
        return len(self.cache)


def _fd_points(z: np.ndarray, step: float, central: bool = False) -> list[tuple[np.ndarray, np.ndarray | None]]:
    """Difference stencil, one ``(plus, minus)`` pair per component.

    Forward differences by default (``minus`` is None); components within
    ``step`` of the upper bound step backwards. ``central`` uses both sides
    wherever the box allows.
    """
    stencil = []
    for i in range(len(z)):
        up, dn = z.copy(), None
        if central and z[i] - step >= 0.0 and z[i] + step <= 1.0:
            dn = z.copy()
            dn[i] -= step
            up[i] += step
        else:
            up[i] += step if z[i] + step <= 1.0 else -step
        stencil.append((up, dn))
    return stencil


def _box_qp_step(g: np.ndarray, H: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Minimise ``g.d + d.H.d / 2`` subject to ``0 <= z + d <= 1`` (``H`` positive definite)."""
    L = np.linalg.cholesky(H)
    # g.d + d.H.d/2 = |L^T d + L^-1 g|^2 / 2 + const, a bounded least-squares problem.
    rhs = -slinalg.solve_triangular(L, g, lower=True)
    lo, hi = -z, 1.0 - z
    res = sopt.lsq_linear(L.T, rhs, bounds=(lo, np.maximum(hi, lo + 1e-300)), method="bvls")
    return np.clip(res.x, lo, hi)


def _projected_gradient(g: np.ndarray, z: np.ndarray) -> np.ndarray:
    pg = g.copy()
    pg[(z <= 0.0) & (g > 0.0)] = 0.0
    pg[(z >= 1.0) & (g < 0.0)] = 0.0
    return pg


def _bfgs_update(H: np.ndarray, s: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Powell-damped BFGS update; keeps ``H`` positive definite on non-convex or kinked objectives."""
    Hs = H @ s
    sHs = float(s @ Hs)
    if sHs <= 0.0:
        return H
    sy = float(s @ y)
    if sy < 0.2 * sHs:
        theta = 0.8 * sHs / (sHs - sy)
        y = theta * y + (1.0 - theta) * Hs
        sy = float(s @ y)
    return H + np.outer(y, y) / sy - np.outer(Hs, Hs) / sHs


def _initial_hessian(g: np.ndarray, first_step: float = 0.2) -> np.ndarray:
    # Scaled so that the first unconstrained step moves at most first_step of the box.
    h = max(float(np.max(np.abs(g))) / first_step, 1e-12)
    return h * np.eye(len(g))


def _sqp(fun, grad, z0, max_iter, ftol, gtol, on_iteration) -> tuple[np.ndarray, int, bool, str]:
    """Box-constrained SQP on the unit box. Returns ``(z, iterations, converged, message)``.

    ``grad(z, central)`` supplies forward differences until a stopping test
    fires; the test is then repeated with central differences, since the
    forward stencil is biased by half a step at a minimum.
    """
    z = np.asarray(z0, dtype=float)
    f = fun(z)
    central = False
    g = grad(z, central)
    H = _initial_hessian(g)

    def refine(reason):
        nonlocal central, g
        if central:
            return True
        central = True
        g = grad(z, central)
        return False

    for it in range(1, max_iter + 1):
        if np.linalg.norm(_projected_gradient(g, z)) < gtol and refine("gradient"):
            return z, it - 1, True, "projected gradient norm below tolerance"
        d = _box_qp_step(g, H, z)
        slope = float(g @ d)
        if not slope < 0.0:
            # Finite-difference noise made the model useless; restart it once.
            H = _initial_hessian(g)
            d = _box_qp_step(g, H, z)
            slope = float(g @ d)
            if not slope < 0.0:
                if refine("direction"):
                    return z, it - 1, True, "no descent direction within the bounds"
                continue
        step, accepted = 1.0, None
        best_trial = (f, None)
        for _ in range(12):
            trial = np.clip(z + step * d, 0.0, 1.0)
            ft = fun(trial)
            if ft < best_trial[0]:
                best_trial = (ft, trial)
            if ft <= f + 1e-4 * step * slope:
                accepted = (ft, trial)
                break
            step *= 0.5
        if accepted is None:
            accepted = best_trial
        if accepted[1] is None:
            if refine("line search"):
                return z, it - 1, False, "line search failed to decrease the objective"
            H = _initial_hessian(g)
            continue
        f_new, z_new = accepted
        g_new = grad(z_new, central)
        H = _bfgs_update(H, z_new - z, g_new - g)
        change = abs(f - f_new)
        z, f, g = z_new, f_new, g_new
        on_iteration(z)
        if change <= ftol * max(abs(f), 1e-300) and refine("objective"):
            return z, it, True, "relative objective change below tolerance"
    return z, max_iter, False, "iteration cap reached"


def optimize(problem: CalibrationProblem, method: str = "sqp", max_iter: int = 100, ftol: float = 1e-4,
             gtol: float = 1e-6, fd_step: float = 1e-2, workers: int = 1, fallback: bool = True,
             executor: Executor | None = None) -> CalibrationResult:
    """Bound-constrained local minimisation of :func:`objective`.

    ``method`` is ``"sqp"`` (the built-in box-constrained SQP), ``"slsqp"``
    (SciPy's implementation) or ``"nelder-mead"``. Gradients are forward
    differences with step ``fd_step`` of each parameter range. Objective
    values are scaled by the target's L1 norm; ``ftol`` bounds the relative
    change per iteration. If a gradient method stops abnormally and
    ``fallback`` is set, Nelder-Mead restarts from the best point found.
    """
    own_pool = None
    if executor is None and workers > 1:
        own_pool = executor = ProcessPoolExecutor(workers)
    try:
        return _optimize(problem, method, max_iter, ftol, gtol, fd_step, fallback, executor)
    finally:
        if own_pool is not None:
            own_pool.shutdown()


def _optimize(problem, method, max_iter, ftol, gtol, fd_step, fallback, executor) -> CalibrationResult:
    ev = _Evaluator(problem, executor)
    scale = problem.target_l1()
    if scale <= 0.0:
        scale = problem.force_scale * problem.n_samples
    z0 = problem.initial_unit()
    bounds = [(0.0, 1.0)] * len(z0)
    trace: list[dict[str, Any]] = []
    last_grad = {"norm": math.inf}

    def fun(z):
        return ev(z) / scale

    def jac(z, central=False):
        z = np.clip(np.asarray(z, dtype=float), 0.0, 1.0)
        stencil = _fd_points(z, fd_step, central)
        pts = [z] + [p for pair in stencil for p in pair if p is not None]
        values = iter(np.array(ev.many(pts)) / scale)
        f0 = next(values)
        g = np.empty(len(z))
        for i, (up, dn) in enumerate(stencil):
            fp = next(values)
            if dn is None:
                g[i] = (fp - f0) / (up[i] - z[i])
            else:
                g[i] = (fp - next(values)) / (up[i] - dn[i])
        last_grad["norm"] = float(np.linalg.norm(g))
        return g

    def log_iteration(z, label):
        z = np.clip(np.asarray(z, dtype=float), 0.0, 1.0)
        f = ev(z)
        trace.append({
            "iteration": len(trace),
            "parameters": problem.from_unit(z),
            "objective": f,
            "best_objective": ev.best_f,
            "evaluations": ev.evaluations,
            "stage": label,
        })

    log_iteration(z0, "start")
    converged = False
    message = ""
    iterations = 0
    method = method.lower()
    if method == "sqp":
        _, iterations, converged, message = _sqp(fun, jac, z0, max_iter, ftol, gtol,
                                                 lambda zk: log_iteration(zk, "sqp"))
        if not converged and fallback and iterations < max_iter:
            message = f"SQP: {message}; Nelder-Mead restart"
            method = "nelder-mead"
            z0 = ev.best_z
    elif method == "slsqp":
        def callback(zk):
            log_iteration(zk, "slsqp")
            if last_grad["norm"] < gtol:
                raise StopIteration
        res = sopt.minimize(fun, z0, jac=jac, method="SLSQP", bounds=bounds, callback=callback,
                            options={"maxiter": max_iter, "ftol": ftol})
        iterations = int(res.get("nit", len(trace) - 1))
        message = str(res.message)
        stopped_on_gradient = last_grad["norm"] < gtol
        converged = bool(res.success) or stopped_on_gradient
        if stopped_on_gradient:
            message = "gradient norm below tolerance"
        hit_cap = res.status == 9
        if not converged and fallback and not hit_cap:
            message = f"SLSQP: {message}; Nelder-Mead restart"
            method = "nelder-mead"
            z0 = ev.best_z
    if method in ("nelder-mead", "nm"):
        n = len(z0)
        simplex = [z0] + [np.clip(z0 + np.where(np.arange(n) == i, 0.1 if z0[i] <= 0.9 else -0.1, 0.0), 0, 1)
                          for i in range(n)]
        res = sopt.minimize(fun, z0, method="Nelder-Mead", bounds=bounds,
                            callback=lambda zk: log_iteration(zk, "nelder-mead"),
                            options={"maxiter": max_iter, "xatol": fd_step / 10, "fatol": ftol,
                                     "initial_simplex": np.array(simplex)})
        iterations += int(res.nit)
        converged = bool(res.success)
        message = (message + "; " if message else "") + f"Nelder-Mead: {res.message}"
    elif method not in ("sqp", "slsqp"):
        raise ValueError(f"unknown optimisation method {method!r}")

    if ev.n_failed == ev.evaluations:
        raise CalibrationInfeasibleError(
            f"all {ev.evaluations} forward evaluations failed; check bounds and the forward setup")
    z_best = ev.best_z
    params = problem.from_unit(z_best)
    curve = ev.curves.get(ev._key(z_best))
    lo, hi = problem.fit_window
    pfe = peak_force_error_pct(curve, problem.target, (lo, hi)) if curve is not None else math.inf
    return CalibrationResult(params, ev.best_f, pfe, iterations, converged, trace, ev.evaluations, message, curve)


# ----------------------------------------------------------------- forward models


def resample(curve: ForceDisplacementCurve, config: SimulationConfig) -> ForceDisplacementCurve:
    """Sample a run's curve at the 100 Hz-equivalent instants of its loading history."""
    if curve.time is None:
        raise ValueError("resampling needs the curve's time stamps")
    dt = config.sample_interval
    t_end = float(curve.time[-1])
    times = np.arange(0.0, t_end + 1e-9 * dt, dt)
    force = np.interp(times, curve.time, curve.force)
    disp = np.interp(times, curve.time, curve.displacement)
    meta = {**curve.metadata, "sample_interval_s": dt}
    return ForceDisplacementCurve(disp, force, times, meta)


@dataclass(frozen=True)
class TissueForward:
    """Brain-tissue shear model with Ogden constants injected from ``mu1, mu2, alpha1, alpha2``."""

    mesh: Mesh
    config: SimulationConfig
    material_name: str = "brain"
    nu: float = DEFAULT_POISSON
    stop_displacement: float | None = None
    threads: int = 1

    def params(self, p: Mapping[str, float]) -> OgdenParams:
        alpha = (p.get("alpha1", TABLE2_ALPHA[0]), p.get("alpha2", TABLE2_ALPHA[1]))
        return OgdenParams.from_poisson((p["mu1"], p["mu2"]), alpha, self.nu)

    def configured(self, p: Mapping[str, float]) -> SimulationConfig:
        base = self.config.materials.get(self.material_name)
        density = base.density if base is not None else self.config.densities.get(self.material_name, 1000.0)
        return self.config.with_material(Material(self.material_name, "ogden2", self.params(p), density))

    def __call__(self, p: Mapping[str, float]) -> ForceDisplacementCurve:
        cfg = self.configured(p)
        return run(self.mesh, cfg, threads=self.threads, stop_displacement=self.stop_displacement).curve


@dataclass(frozen=True)
class InterfaceForward:
    """Brain-skull complex model with ``tn0, ts0, G`` injected into the named cohesive law."""

    mesh: Mesh
    config: SimulationConfig
    law_name: str = "interface"
    stop_displacement: float | None = None
    threads: int = 1

    def law(self, p: Mapping[str, float]) -> CohesiveLaw:
        base = self.config.laws.get(self.law_name)
        if base is None:
            return CohesiveLaw(p["tn0"], p["ts0"], p["G"])
        return with_strengths(base, p["tn0"], p["ts0"], p["G"])

    def configured(self, p: Mapping[str, float]) -> SimulationConfig:
        return self.config.with_law(self.law_name, self.law(p))

    def __call__(self, p: Mapping[str, float]) -> ForceDisplacementCurve:
        cfg = self.configured(p)
        return run(self.mesh, cfg, threads=self.threads, stop_displacement=self.stop_displacement).curve


def synthesize_target(mesh: Mesh, config: SimulationConfig, true_params: OgdenParams | CohesiveLaw | None = None,
                      noise: float = 0.0, seed: int | None = None, material_name: str = "brain",
                      law_name: str = "interface", threads: int = 1) -> ForceDisplacementCurve:
    """Forward run at ``true_params``, resampled at 100 Hz equivalent, with optional noise.

    ``noise = p`` multiplies every force sample by an independent uniform
    factor in ``[1 - p, 1 + p]`` drawn from a generator seeded with ``seed``.
    """
    if noise < 0.0:
        raise ValueError("noise amplitude must be non-negative")
    cfg = config
    if isinstance(true_params, OgdenParams):
        base = config.materials.get(material_name)
        density = base.density if base is not None else 1000.0
        cfg = config.with_material(Material(material_name, "ogden2", true_params, density))
    elif isinstance(true_params, CohesiveLaw):
        cfg = config.with_law(law_name, true_params)
    curve = resample(run(mesh, cfg, threads=threads).curve, cfg)
    if noise > 0.0:
        rng = np.random.default_rng(seed)
        curve.force = curve.force * rng.uniform(1.0 - noise, 1.0 + noise, size=len(curve))
        curve.metadata["noise"] = noise
        curve.metadata["seed"] = seed
    return curve


# ------------------------------------------------------------------ two-stage protocol


def calibrate_tissue(target: ForceDisplacementCurve, mesh: Mesh, config: SimulationConfig,
                     mode: str = "fit_mu_only", start: Sequence[float] = (400.0, 200.0),
                     mu_bounds: tuple[float, float] = (50.0, 5000.0),
                     alpha_start: Sequence[float] = TABLE2_ALPHA,
                     alpha_bounds: Sequence[tuple[float, float]] = ((-20.0, -1.0), (1.0, 30.0)),
                     max_strain: float = 0.3, material_name: str = "brain", nu: float = DEFAULT_POISSON,
                     threads: int = 1, **options) -> tuple[OgdenParams, CalibrationResult]:
    """Fit Ogden constants to a tissue shear curve over shear strain ``[0, max_strain]``.

    ``fit_mu_only`` frees ``mu1, mu2`` with alpha fixed at ``alpha_start``;
    ``fit_mu_and_alpha`` frees all four. D1 follows mu0 through ``nu``.
    """
    if mesh.cohesives.size:
        raise ValueError("tissue calibration expects a mesh without cohesive elements")
    if any(mesh.materials.get(m, {}).get("model") == "rigid" for m in mesh.hex_materials):
        raise ValueError("tissue calibration expects a mesh of tissue only")
    free = [FreeParameter("mu1", *mu_bounds, start[0]), FreeParameter("mu2", *mu_bounds, start[1])]
    fixed: dict[str, float] = {}
    if mode == "fit_mu_only":
        fixed = {"alpha1": float(alpha_start[0]), "alpha2": float(alpha_start[1])}
    elif mode == "fit_mu_and_alpha":
        free += [FreeParameter("alpha1", *alpha_bounds[0], alpha_start[0]),
                 FreeParameter("alpha2", *alpha_bounds[1], alpha_start[1])]
    else:
        raise ValueError(f"unknown tissue calibration mode {mode!r}")
    window_end = min(max_strain * deformable_height(mesh), float(target.displacement.max()))
    forward = TissueForward(mesh, config, material_name, nu, stop_displacement=window_end, threads=threads)
    problem = CalibrationProblem(free, target, forward, (0.0, window_end), fixed)
    result = optimize(problem, **options)
    return forward.params(result.parameters), result


def calibrate_interface(target: ForceDisplacementCurve, mesh: Mesh, config: SimulationConfig,
                        tissue: OgdenParams | None = None, start: Sequence[float] = (2.0e3, 1.5e3, 0.3),
                        bounds: Sequence[tuple[float, float]] = ((0.5e3, 8.0e3), (0.5e3, 8.0e3), (0.05, 2.0)),
                        window_factor: float = 1.25, material_name: str = "brain", law_name: str = "interface",
                        threads: int = 1, prefit: bool = True, **options) -> tuple[CohesiveLaw, CalibrationResult]:
    """Fit ``tn0``, shared ``ts0 = tt0`` and ``G`` with the tissue held fixed.

    The fit window runs from zero to ``window_factor`` times the displacement
    of the target's peak force (capped at the end of the target).

    The sharp force drop at interface failure makes the force misfit nearly
    flat away from the optimum: once the simulated drop misses the target's,
    the misfit barely changes with the parameters. With ``prefit`` the search
    first minimises the work misfit, which grows steadily with the drop
    offset, and then refines the force misfit from there.
    """
    if not mesh.cohesives.size:
        raise ValueError("interface calibration needs a mesh with cohesive elements")
    cfg = config
    if tissue is not None:
        base = config.materials.get(material_name)
        density = base.density if base is not None else 1000.0
        cfg = config.with_material(Material(material_name, "ogden2", tissue, density))
    names = ("tn0", "ts0", "G")
    free = [FreeParameter(n, lo, hi, s0) for n, (lo, hi), s0 in zip(names, bounds, start)]
    d_peak = float(target.displacement[int(np.argmax(target.force))])
    window_end = min(window_factor * d_peak, float(target.displacement.max()))
    forward = InterfaceForward(mesh, cfg, law_name, stop_displacement=window_end, threads=threads)
    stages = []
    if prefit:
        pre = optimize(CalibrationProblem(free, target, forward, (0.0, window_end), measure="work"), **options)
        stages.append(("prefit", pre))
        free = [replace(p, initial=pre.parameters[p.name]) for p in free]
    result = optimize(CalibrationProblem(free, target, forward, (0.0, window_end)), **options)
    if stages:
        result = _merge_stages(stages + [("fit", result)])
    law = forward.law(result.parameters)
    return law, result


def _merge_stages(stages: list[tuple[str, CalibrationResult]]) -> CalibrationResult:
    """The last stage's result with the traces and counts of all stages."""
    trace, evaluations, iterations, messages = [], 0, 0, []
    for name, res in stages:
        for row in res.trace:
            trace.append({**row, "iteration": len(trace), "stage": f"{name}:{row['stage']}",
                          "evaluations": row["evaluations"] + evaluations})
        evaluations += res.evaluations
        iterations += res.iterations
        messages.append(f"{name}: {res.message}")
    return replace(stages[-1][1], trace=trace, evaluations=evaluations, iterations=iterations,
                   message="; ".join(messages))
