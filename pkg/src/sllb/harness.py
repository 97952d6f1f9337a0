"""Convergence laboratory: coupled multi-level Monte Carlo studies.

Every path draws one Brownian path at the finest temporal resolution; coarser
levels see the same path through aggregated increments, and the finest level
serves as the reference solution. Paths are independent work units, and all
reductions run over path indices in sorted order, so results do not depend
on the number of workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
import multiprocessing

import numpy as np

from . import galerkin
from .fem import FeSpace, l2_project, prolongation_matrix, quadratic_forms
from .mesh import build_interval_mesh, build_structured_tri_mesh, refine
from .noise import aggregate_increments, build_modes, sample_path
from .scheme import (
    SchemeParams,
    StepFailure,
    build_operators,
    run_trajectory,
    schedule_from_monitor,
)


# --- parameter selection --------------------------------------------------

def _check_rates_inputs(h, dt, q, beta, alpha, c_star):
    for name, v in (("h", h), ("dt", dt), ("alpha", alpha), ("c_star", c_star)):
        if not v > 0:
            raise ValueError(f"{name} must be positive, got {v!r}")
    for name, v in (("q", q), ("beta", beta)):
        if not 0 < v < 1:
            raise ValueError(f"{name} must lie in (0, 1), got {v!r}")


def select_parameters_2d(h, dt, q=0.5, beta=0.5, alpha=0.45, c_star=1.0):
    """Stopping radius and regularisation ``(R, epsilon)`` for a 2D level."""
    _check_rates_inputs(h, dt, q, beta, alpha, c_star)
    x = h + dt ** (alpha / 2)
    if x >= 1:
        raise ValueError(f"h + dt^(alpha/2) = {x:g} must be below 1 for R(h, dt) to be defined")
    R = (-(q * beta) / (2 * c_star) * math.log(x)) ** (1 / 9)
    eps = max(R ** (-1 / 3), (dt ** (alpha * q / 2 * (beta + 3))) ** (3 / 8))
    return R, eps


def select_radius_1d(h, dt, q=0.5, beta=0.5, alpha=0.45, c_star=1.0):
    """Stopping radius ``R(h, dt)`` for a 1D level."""
    _check_rates_inputs(h, dt, q, beta, alpha, c_star)
    x = h + dt**alpha
    if x >= 1:
        raise ValueError(f"h + dt^alpha = {x:g} must be below 1 for R(h, dt) to be defined")
    return (-(q * beta) / c_star * math.log(x)) ** (1 / 4)


def rate_base(dimension: int, h, dt, alpha):
    """``h + dt^alpha`` in 1D, ``h + dt^(alpha/2)`` in 2D."""
    h, dt = np.asarray(h, dtype=float), np.asarray(dt, dtype=float)
    return h + dt ** (alpha if dimension == 1 else alpha / 2)


# --- configuration --------------------------------------------------------

@dataclass(frozen=True)
class InitialCondition:
    """Smooth, Neumann-compatible initial magnetisation.

    ``kind="cosine"`` gives ``A (cos(pi x/L), cos(2 pi x/L)/2, 1/2)`` (times
    ``cos(pi y/Ly)`` in the first component in 2D); ``"constant"`` gives
    ``value`` everywhere; ``"zero"`` gives 0.
    """

    kind: str = "cosine"
    amplitude: float = 0.2
    value: tuple = (1.0, 0.0, 0.0)
    lengths: tuple = (1.0,)

    def __call__(self, points):
        p = np.atleast_2d(np.asarray(points, dtype=float))
        n = p.shape[0]
        if self.kind == "zero":
            return np.zeros((n, 3))
        if self.kind == "constant":
            return np.tile(np.asarray(self.value, dtype=float), (n, 1))
        if self.kind != "cosine":
            raise ValueError(f"unknown initial condition {self.kind!r}")
        x = p[:, 0] / self.lengths[0]
        first = np.cos(np.pi * x)
        if p.shape[1] > 1 and len(self.lengths) > 1:
            first = first * np.cos(np.pi * p[:, 1] / self.lengths[1])
        return self.amplitude * np.column_stack([first, 0.5 * np.cos(2 * np.pi * x), np.full(n, 0.5)])


@dataclass(frozen=True)
class ModelConfig:
    """Physics, noise and stopping settings shared by every level."""

    dimension: int = 1
    lengths: tuple = (1.0,)
    T: float = 1.0
    kappa1: float = 1.0
    kappa2: float = 1.0
    gamma: float = 1.0
    mu: float = 1.0
    epsilon: float = 0.0
    noise_modes: int = 4
    decay: float = 4.0
    sigma: float = 0.5
    initial: InitialCondition = InitialCondition()
    stopping: str = "none"  # "none", "auto" (R from the formula) or "fixed"
    R: float = math.inf
    solver: str = "auto"

    def __post_init__(self):
        if self.dimension not in (1, 2) or len(self.lengths) != self.dimension:
            raise ValueError("lengths must have one entry per dimension (1 or 2)")
        if self.stopping not in ("none", "auto", "fixed"):
            raise ValueError(f"stopping must be none, auto or fixed, got {self.stopping!r}")


@dataclass(frozen=True)
class ExperimentPlan:
    """Nested levels ``(n_cells, N)``; the finest one is the reference."""

    dimension: int = 1
    levels: tuple = ((16, 32), (32, 64), (64, 128))
    n_paths: int = 10
    base_seed: int = 0
    gamma: float = 1.0
    q: float = 0.5
    beta: float = 0.5
    alpha: float = 0.45
    c_star: float = 1.0
    reference_level: int = -1

    def __post_init__(self):
        levels = tuple(tuple(int(v) for v in lv) for lv in self.levels)
        object.__setattr__(self, "levels", levels)
        if len(levels) < 1:
            raise ValueError("plan needs at least one level")
        if not (0 < self.q < 1 and 0 < self.beta < 1):
            raise ValueError("q and beta must lie in (0, 1)")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if self.n_paths < 1:
            raise ValueError("n_paths must be at least 1")
        ref = self.reference_index
        n_ref, N_ref = levels[ref]
        for n, N in levels:
            if n_ref % n or (n_ref // n) & (n_ref // n - 1):
                raise ValueError(f"level n_cells={n} is not a dyadic coarsening of {n_ref}")
            if N_ref % N:
                raise ValueError(f"level N={N} does not divide the reference N={N_ref}")

    @property
    def reference_index(self) -> int:
        return self.reference_level % len(self.levels)


def path_seed(base_seed: int, path: int) -> int:
    return int(np.random.SeedSequence([int(base_seed), int(path)]).generate_state(1, np.uint64)[0])


# --- level setup ----------------------------------------------------------

class _Level:
    def __init__(self, mesh, N, model: ModelConfig, plan: ExperimentPlan):
        self.mesh = mesh
        self.N = N
        self.space = FeSpace(mesh)
        self.ops = build_operators(self.space)
        self.modes = build_modes(model.noise_modes, model.decay, model.sigma, mesh)
        self.h = mesh.h
        self.dt = model.T / N
        eps = model.epsilon
        if model.stopping == "auto":
            if model.dimension == 1:
                R = select_radius_1d(self.h, self.dt, plan.q, plan.beta, plan.alpha, plan.c_star)
            else:
                R, eps = select_parameters_2d(self.h, self.dt, plan.q, plan.beta, plan.alpha, plan.c_star)
        elif model.stopping == "fixed":
            R = model.R
        else:
            R = math.inf
        self.R = R
        self.params = SchemeParams(
            T=model.T, N=N, kappa1=model.kappa1, kappa2=model.kappa2, gamma=model.gamma,
            mu=model.mu, epsilon=eps, R=R, alpha=plan.alpha, solver=model.solver,
        )


def _base_mesh(model: ModelConfig, n: int):
    if model.dimension == 1:
        return build_interval_mesh(model.lengths[0], n)
    return build_structured_tri_mesh(model.lengths[0], model.lengths[1], n, n)


@lru_cache(maxsize=8)
def _setup(plan: ExperimentPlan, model: ModelConfig):
    """Meshes (one refinement chain), operators and prolongations per level."""
    n_min = min(n for n, _ in plan.levels)
    meshes = {n_min: _base_mesh(model, n_min)}
    n = n_min
    n_max = max(n for n, _ in plan.levels)
    while n < n_max:
        meshes[2 * n] = refine(meshes[n])
        n *= 2
    levels = [_Level(meshes[n], N, model, plan) for n, N in plan.levels]
    ref = levels[plan.reference_index]
    prolong = [prolongation_matrix(lv.space, ref.space) for lv in levels]
    return levels, prolong


# --- reports --------------------------------------------------------------

@dataclass
class ErrorReport:
    """Per-(path, level) error functionals plus level metadata.

    Rows of aborted paths hold NaN and are excluded from every aggregate.
    """

    h: np.ndarray
    dt: np.ndarray
    e_max_sq: np.ndarray      # (paths, levels)
    e_grad_sq: np.ndarray
    stopped_at: np.ndarray    # level step index of the stopping time, -1 if none
    R: np.ndarray | None = None
    epsilon: np.ndarray | None = None
    reference_level: int | None = None
    aborted: list = field(default_factory=list)
    dimension: int = 1
    alpha: float = 0.45

    @classmethod
    def from_arrays(cls, h, dt, e_max_sq, e_grad_sq=None, **kw) -> ErrorReport:
        e_max_sq = np.atleast_2d(np.asarray(e_max_sq, dtype=float))
        e_grad_sq = np.zeros_like(e_max_sq) if e_grad_sq is None else np.atleast_2d(np.asarray(e_grad_sq, dtype=float))
        return cls(np.asarray(h, dtype=float), np.asarray(dt, dtype=float), e_max_sq, e_grad_sq,
                   np.full(e_max_sq.shape, -1), **kw)

    @property
    def n_levels(self) -> int:
        return len(self.h)

    @property
    def valid(self) -> np.ndarray:
        return np.all(np.isfinite(self.e_max_sq), axis=1)

    @property
    def totals(self) -> np.ndarray:
        return self.e_max_sq + self.e_grad_sq

    def mean(self, functional: str = "e_max_sq") -> np.ndarray:
        return np.mean(self._functional(functional)[self.valid], axis=0)

    def _functional(self, functional: str) -> np.ndarray:
        if functional == "total":
            return self.totals
        return getattr(self, functional)

    def bootstrap_ci(self, functional="e_max_sq", n_boot=1000, seed=0, level=0.95):
        """Percentile bootstrap interval for the per-level mean."""
        data = self._functional(functional)[self.valid]
        rng = np.random.default_rng(seed)
        idx = rng.integers(0, data.shape[0], size=(n_boot, data.shape[0]))
        means = data[idx].mean(axis=1)
        a = (1 - level) / 2
        return np.quantile(means, a, axis=0), np.quantile(means, 1 - a, axis=0)


@dataclass(frozen=True)
class RateEstimate:
    slope: float
    stderr: float
    ci_lo: float
    ci_hi: float
    axis: str
    levels: tuple


def _slope(x, y):
    A = np.column_stack([x, np.ones_like(x)])
    return np.linalg.lstsq(A, y, rcond=None)[0][0]


def estimate_rates(report: ErrorReport, axis: str = "h", functional: str = "e_max_sq",
                   n_boot: int = 1000, seed: int = 0, strict: bool = True) -> RateEstimate:
    """Least-squares slope of log(mean error^2) against log(h) or log(dt).

    The standard error and 95% interval come from resampling paths.
    """
    if axis not in ("h", "dt"):
        raise ValueError("axis must be 'h' or 'dt'")
    x_all = report.h if axis == "h" else report.dt
    other = report.dt if axis == "h" else report.h
    usable = [i for i in range(report.n_levels) if i != report.reference_level]
    data = report._functional(functional)[report.valid][:, usable]
    if data.shape[0] == 0:
        raise ValueError("no usable paths in the report")
    means = data.mean(axis=0)
    keep = means > 0
    usable = [u for u, k in zip(usable, keep) if k]
    data = data[:, keep]
    if len(usable) < 3:
        raise ValueError(f"need at least 3 usable levels, got {len(usable)}")
    if strict and np.ptp(np.log(other[usable])) > 1e-12:
        raise ValueError(f"levels vary in more than the {axis!r} axis")
    lx = np.log(x_all[usable])
    if np.ptp(lx) == 0:
        raise ValueError(f"levels do not vary along {axis!r}")
    slope = _slope(lx, np.log(data.mean(axis=0)))
    rng = np.random.default_rng(seed)
    boots = []
    for _ in range(n_boot):
        sample = data[rng.integers(0, data.shape[0], data.shape[0])].mean(axis=0)
        if np.all(sample > 0):
            boots.append(_slope(lx, np.log(sample)))
    boots = np.array(boots) if boots else np.array([slope])
    return RateEstimate(float(slope), float(np.std(boots)), float(np.quantile(boots, 0.025)),
                        float(np.quantile(boots, 0.975)), axis, tuple(usable))


@dataclass(frozen=True)
class Exceedance:
    frequency: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    threshold: np.ndarray
    n: int


def wilson_interval(k, n, z=1.959963984540054):
    k, n = np.asarray(k, dtype=float), float(n)
    if n == 0:
        return np.zeros_like(k), np.ones_like(k)
    p = k / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    lo = np.where(k == 0, 0.0, np.clip(centre - half, 0, 1))
    hi = np.where(k == n, 1.0, np.clip(centre + half, 0, 1))
    return lo, hi


def exceedance_probability(report: ErrorReport, gamma: float, beta: float, rate_base, epsilon=None) -> Exceedance:
    """Fraction of paths whose ``e_max_sq + e_grad_sq`` exceeds
    ``gamma rate_base^(1-beta)`` (plus ``gamma epsilon^(1-beta)`` if given),
    per level, with Wilson 95% intervals."""
    rb = np.broadcast_to(np.asarray(rate_base, dtype=float), (report.n_levels,))
    with np.errstate(invalid="ignore"):
        thr = gamma * rb ** (1 - beta)
    if epsilon is not None:
        thr = thr + gamma * np.broadcast_to(np.asarray(epsilon, dtype=float), (report.n_levels,)) ** (1 - beta)
    tot = report.totals[report.valid]
    k = np.sum(tot > thr[None, :], axis=0)
    n = tot.shape[0]
    freq = k / n if n else np.zeros(report.n_levels)
    lo, hi = wilson_interval(k, n)
    return Exceedance(freq, lo, hi, thr, n)


# --- coupled study --------------------------------------------------------

def _errors(level, P, rec, ref, ratio):
    """``(e_max_sq, e_grad_sq)`` of one level against the reference."""
    space = ref.space
    dtau = rec.delta_tau
    active = np.concatenate([[0], np.cumsum(dtau > 0)])  # active steps up to n
    e_max = 0.0
    e_grad = 0.0
    for n, coeffs in enumerate(rec.fields):
        fine = (P @ coeffs.reshape(3, -1).T).T.ravel()
        e = fine - ref.fields[active[n] * ratio]
        l2, semi = quadratic_forms(space, e)
        e_max = max(e_max, l2)
        if n > 0:
            e_grad += semi * dtau[n - 1]
    return e_max, e_grad


def _stop_index(rec):
    return -1 if rec.stopped_at is None else int(rec.stopped_at)


def run_path(plan: ExperimentPlan, model: ModelConfig, p: int):
    """All levels of path ``p``; returns ``(e_max, e_grad, stopped)`` or an abort message."""
    levels, prolong = _setup(plan, model)
    ri = plan.reference_index
    ref_level = levels[ri]
    N_ref = ref_level.N
    path = sample_path(path_seed(plan.base_seed, p), model.noise_modes, N_ref, model.T / N_ref)
    L = len(levels)
    e_max = np.zeros(L)
    e_grad = np.zeros(L)
    stopped = np.full(L, -1)
    try:
        ref = run_trajectory(model.initial, path.dW, ref_level.params, ref_level.space,
                             ref_level.modes, ops=ref_level.ops, check_energy=False)
        stopped[ri] = _stop_index(ref)
        for i, lv in enumerate(levels):
            if i == ri:
                continue
            sched = schedule_from_monitor(ref.h1_norms, lv.R, lv.N)
            inc = aggregate_increments(path, N_ref // lv.N)
            rec = run_trajectory(model.initial, inc, lv.params, lv.space, lv.modes,
                                 schedule=sched, ops=lv.ops, check_energy=False)
            e_max[i], e_grad[i] = _errors(lv, prolong[i], rec, ref, N_ref // lv.N)
            stopped[i] = _stop_index(rec)
    except StepFailure as exc:
        return f"path {p}: {exc}"
    return e_max, e_grad, stopped


def _map_paths(fn, args_list, workers: int):
    if workers <= 1:
        return [fn(*a) for a in args_list]
    ctx = multiprocessing.get_context("spawn")
    with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
        futures = [pool.submit(fn, *a) for a in args_list]
        return [f.result() for f in futures]


def run_coupled_study(plan: ExperimentPlan, model: ModelConfig, workers: int = 1) -> ErrorReport:
    """Coupled multi-level study over ``plan.n_paths`` paths."""
    if plan.dimension != model.dimension:
        raise ValueError("plan and model disagree on the dimension")
    levels, _ = _setup(plan, model)
    results = _map_paths(run_path, [(plan, model, p) for p in range(plan.n_paths)], workers)
    L = len(levels)
    M = plan.n_paths
    e_max = np.full((M, L), np.nan)
    e_grad = np.full((M, L), np.nan)
    stopped = np.full((M, L), -1)
    aborted = []
    for p, res in enumerate(results):
        if isinstance(res, str):
            aborted.append(res)
            continue
        e_max[p], e_grad[p], stopped[p] = res
    return ErrorReport(
        h=np.array([lv.h for lv in levels]),
        dt=np.array([lv.dt for lv in levels]),
        e_max_sq=e_max,
        e_grad_sq=e_grad,
        stopped_at=stopped,
        R=np.array([lv.R for lv in levels]),
        epsilon=np.array([lv.params.epsilon for lv in levels]),
        reference_level=plan.reference_index,
        aborted=aborted,
        dimension=model.dimension,
        alpha=plan.alpha,
    )


# --- regularisation study -------------------------------------------------

@dataclass
class EpsilonReport:
    epsilons: np.ndarray
    sup_l2_sq: np.ndarray    # (paths, eps)
    grad_int: np.ndarray     # (paths, eps), time integral of |grad diff|^2
    gamma: float
    beta: float

    @property
    def mean_sup_l2_sq(self) -> np.ndarray:
        return self.sup_l2_sq.mean(axis=0)

    @property
    def mean_grad_int(self) -> np.ndarray:
        return self.grad_int.mean(axis=0)

    def exceedance(self) -> Exceedance:
        stat = self.sup_l2_sq + 0.5 * self.grad_int
        thr = self.gamma * self.epsilons ** (1 - self.beta)
        k = np.sum(stat > thr[None, :], axis=0)
        n = stat.shape[0]
        lo, hi = wilson_interval(k, n)
        return Exceedance(k / n, lo, hi, thr, n)


def _epsilon_path(eps_list, n_modes, N, model, base_seed, p, n_substeps):
    path = sample_path(path_seed(base_seed, p), model.noise_modes, N * n_substeps, model.T / (N * n_substeps))
    modes = build_modes(model.noise_modes, model.decay, model.sigma, None)
    modes = _modes_on_length(modes, model)
    state0 = galerkin.project_Pn(model.initial, n_modes, model.lengths[0])
    lam = state0.eigenvalues
    dt = model.T / N

    def run(eps):
        params = SchemeParams(T=model.T, N=N, kappa1=model.kappa1, kappa2=model.kappa2,
                              gamma=model.gamma, mu=model.mu, epsilon=eps)
        return np.stack([s.coeffs for s in galerkin.integrate(state0, path.dW, params, modes, n_substeps)])

    reference = run(0.0)
    sup, grad = [], []
    for eps in eps_list:
        d = reference if eps == 0 else run(eps)
        diff = d - reference                       # (N+1, 3, n)
        l2 = np.sum(diff**2, axis=(1, 2))          # Parseval
        semi = np.sum(lam * diff**2, axis=(1, 2))
        sup.append(l2.max())
        grad.append(np.sum(semi[1:]) * dt)
    return np.array(sup), np.array(grad)


def _modes_on_length(modes, model):
    # modes built without a mesh default to L = 1
    if model.lengths[0] == 1.0:
        return modes
    from .mesh import build_interval_mesh as _bim
    return build_modes(model.noise_modes, model.decay, model.sigma, _bim(model.lengths[0], 1))


def epsilon_convergence_study(eps_list, n_modes: int, N: int, n_paths: int, model: ModelConfig,
                              base_seed: int = 0, gamma: float = 1.0, beta: float = 0.5,
                              n_substeps: int = 1, workers: int = 1) -> EpsilonReport:
    """Differences between regularised runs and the unregularised one on
    shared paths, with the spectral Galerkin integrator on a fixed grid."""
    if model.dimension != 1:
        raise ValueError("the epsilon study runs in 1D only: no unregularised 2D reference is computable")
    eps = np.asarray(eps_list, dtype=float)
    if np.any(np.diff(eps) > 0) or np.any(eps < 0) or np.any(eps >= 1):
        raise ValueError("eps_list must be decreasing values in [0, 1)")
    args = [(tuple(eps), n_modes, N, model, base_seed, p, n_substeps) for p in range(n_paths)]
    results = _map_paths(_epsilon_path, args, workers)
    sup = np.array([r[0] for r in results])
    grad = np.array([r[1] for r in results])
    return EpsilonReport(eps, sup, grad, gamma, beta)


# --- finite elements against the spectral reference ----------------------

def fem_vs_galerkin(levels, model: ModelConfig, seed: int = 0, n_substeps: int = 1):
    """Max-over-time L2 distance between the 1D scheme and the spectral
    integrator, both driven by one Brownian path, for each
    ``(n_cells, N, n_modes)`` level."""
    if model.dimension != 1:
        raise ValueError("the spectral cross-check is 1D only")
    N_fine = max(N for _, N, _ in levels) * n_substeps
    path = sample_path(seed, model.noise_modes, N_fine, model.T / N_fine)
    out = []
    for n_cells, N, n_modes in levels:
        mesh = build_interval_mesh(model.lengths[0], n_cells)
        space = FeSpace(mesh)
        modes = build_modes(model.noise_modes, model.decay, model.sigma, mesh)
        params = SchemeParams(T=model.T, N=N, kappa1=model.kappa1, kappa2=model.kappa2,
                              gamma=model.gamma, mu=model.mu)
        rec = run_trajectory(model.initial, aggregate_increments(path, N_fine // N), params, space, modes)
        state0 = galerkin.project_Pn(model.initial, n_modes, model.lengths[0])
        sub_inc = aggregate_increments(path, N_fine // (N * n_substeps))
        states = galerkin.integrate(state0, sub_inc, params, modes, n_substeps)
        pts = space.points.reshape(-1, 1)
        worst = 0.0
        for coeffs, s in zip(rec.fields, states):
            u = space.values_at_quad(coeffs)
            v = s(pts[:, 0]).reshape(u.shape)
            worst = max(worst, space.integrate(np.sum((u - v) ** 2, axis=-1)))
        out.append(math.sqrt(worst))
    return np.array(out)
