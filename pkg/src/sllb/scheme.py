"""Implicit truncated finite element time-stepper.

One step solves the linear, coercive system

    (M + dtau [eps B + kappa1 K + gamma C(m_prev) + kappa2 G_mu(m_prev)]) m
        = M m_prev + dtau S(m_prev) + 1(active) D(m_prev, dW)

where ``C`` is the skew cross-convection operator, ``G_mu`` the mass
weighted by ``1 + mu |m_prev|^2``, ``S`` the Stratonovich correction load and
``D`` the diffusion load driven by the full Brownian increment over the step.
Steps after the discrete stopping time have ``dtau = 0`` and return the
previous state unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence, TextIO

import numpy as np

from . import noise as noise_mod
from .fem import FeSpace, Field, cross_blocks, l2_project, quadratic_forms, weighted_mass_data
from .linalg import DEFAULT_TOL, SolverError, solve_sparse
from .noise import NoiseModes


@dataclass(frozen=True)
class SchemeParams:
    """Physical constants, regularisation, time grid and stopping radius."""

    T: float = 1.0
    N: int = 64
    kappa1: float = 1.0
    kappa2: float = 1.0
    gamma: float = 1.0
    mu: float = 1.0
    epsilon: float = 0.0
    R: float = math.inf
    alpha: float = 0.45
    tol: float = DEFAULT_TOL
    solver: str = "auto"

    def __post_init__(self):
        for name in ("kappa1", "kappa2", "gamma", "mu", "T"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)!r}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"N must be a positive integer, got {self.N!r}")
        if not 0.0 <= self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon!r}")
        if not 0.0 < self.alpha < 0.5:
            raise ValueError(f"alpha must lie in (0, 1/2), got {self.alpha!r}")
        if not self.R >= 0:
            raise ValueError(f"R must be non-negative, got {self.R!r}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    def check_dimension(self, dimension: int) -> None:
        if dimension == 1 and self.epsilon != 0.0:
            raise ValueError("epsilon must be 0 in dimension 1 (the 1D scheme is unregularised)")
        if dimension == 2 and self.epsilon == 0.0:
            raise ValueError("epsilon must be positive in dimension 2")

    def with_(self, **changes) -> SchemeParams:
        return replace(self, **changes)


class StepOperators:
    """Constant forms of one space: mass, stiffness and (P2) bi-Laplacian."""

    def __init__(self, space: FeSpace):
        self.space = space
        self.mass = space.mass_data
        self.stiffness = space.stiffness_data
        self.bilaplacian = space.bilaplacian_data if space.degree == 2 else None
        self.mass_csr = space.scalar_csr(self.mass)
        self.stiffness_csr = space.scalar_csr(self.stiffness)
        self.bilaplacian_csr = None if self.bilaplacian is None else space.scalar_csr(self.bilaplacian)

    def apply_mass(self, coeffs: np.ndarray) -> np.ndarray:
        return (self.mass_csr @ coeffs.reshape(3, -1).T).T.ravel()

    def form(self, which: str, u: np.ndarray, v: np.ndarray | None = None) -> float:
        """``v^T A u`` for one of the blockwise constant forms."""
        A = {"mass": self.mass_csr, "stiffness": self.stiffness_csr, "bilaplacian": self.bilaplacian_csr}[which]
        if A is None:
            return 0.0
        v = u if v is None else v
        return float(np.einsum("ia,ia->", v.reshape(3, -1), (A @ u.reshape(3, -1).T).T))


def build_operators(space: FeSpace) -> StepOperators:
    return StepOperators(space)


def _system(m_prev: np.ndarray, delta_tau: float, params: SchemeParams, ops: StepOperators):
    space = ops.space
    blocks = (delta_tau * params.gamma) * cross_blocks(space, m_prev)
    diag = params.kappa1 * ops.stiffness + params.kappa2 * weighted_mass_data(space, m_prev, params.mu)
    if params.epsilon:
        diag = diag + params.epsilon * ops.bilaplacian
    diag = ops.mass + delta_tau * diag
    for i in range(3):
        blocks[i, i] += diag
    return space.block_csr(blocks)


def step_rhs(m_prev: Field, delta_tau, dWn, params, ops, modes, active: bool) -> np.ndarray:
    b = ops.apply_mass(m_prev.coeffs)
    if len(modes):
        if delta_tau:
            b += delta_tau * noise_mod.stratonovich_load(m_prev, modes, params.gamma)
        if active:
            b += noise_mod.diffusion_load(m_prev, modes, dWn, params.kappa1, params.gamma)
    return b


def step(
    m_prev: Field,
    delta_tau: float,
    dWn,
    params: SchemeParams,
    ops: StepOperators,
    modes: NoiseModes,
    active: bool | None = None,
) -> Field:
    """Advance one step; ``active`` defaults to ``delta_tau > 0``."""
    active = delta_tau > 0 if active is None else active
    if delta_tau == 0 and not active:
        return m_prev
    b = step_rhs(m_prev, delta_tau, dWn, params, ops, modes, active)
    A = _system(m_prev.coeffs, delta_tau, params, ops)
    x = solve_sparse(A, b, tol=params.tol, method=params.solver)
    return Field(m_prev.space, x)


def energy_identity_terms(m_prev: Field, m_new: Field, delta_tau, dWn, params, ops, modes, active=None) -> dict:
    """Both sides of the discrete energy identity obtained by testing the
    step equation with ``m_new``. Every integral is re-evaluated from node
    values with the assembly quadrature."""
    active = delta_tau > 0 if active is None else active
    space = ops.space
    p, m = m_prev.coeffs, m_new.coeffs
    d = m - p
    lhs = 0.5 * ops.form("mass", m) + 0.5 * ops.form("mass", d) - 0.5 * ops.form("mass", p)

    pq = space.values_at_quad(p)
    mq = space.values_at_quad(m)
    grad_m = space.grads_at_quad(m)
    weight = 1.0 + params.mu * np.sum(pq * pq, axis=-1)
    dissipation = (
        params.epsilon * ops.form("bilaplacian", m)
        + params.kappa1 * ops.form("stiffness", m)
        + params.kappa2 * space.integrate(weight * np.sum(mq * mq, axis=-1))
    )
    # (p x grad m) . grad m, zero pointwise up to rounding
    cross = params.gamma * space.integrate(
        np.einsum("cqid,cqid->cq", np.cross(pq[:, :, :, None], grad_m, axis=2), grad_m)
    )
    strat = 0.0
    diffusion = 0.0
    if len(modes):
        G = modes.values
        pxg = np.cross(pq[None], G)
        mxg = np.cross(mq[None], G)
        strat = 0.5 * params.gamma**2 * space.integrate(-np.einsum("kcqi,kcqi->cq", pxg, mxg))
        if active:
            inner = np.einsum("kcqi,cqi->kcq", params.kappa1 * G + params.gamma * pxg, mq)
            diffusion = float(np.dot(np.asarray(dWn, dtype=float), np.sum(space.weights * inner, axis=(1, 2))))
    rhs = -(dissipation + cross) * delta_tau + strat * delta_tau + diffusion
    return {"lhs": lhs, "rhs": rhs, "dissipation": dissipation, "cross": cross,
            "stratonovich": strat, "diffusion": diffusion}


def energy_identity_residual(m_prev, m_new, delta_tau, dWn, params, ops, modes, active=None) -> float:
    """Absolute defect of the per-step energy identity."""
    t = energy_identity_terms(m_prev, m_new, delta_tau, dWn, params, ops, modes, active)
    return abs(t["lhs"] - t["rhs"])


def energy_tolerance(m_new: Field) -> float:
    l2, semi = quadratic_forms(m_new.space, m_new.coeffs)
    return 1e-9 * (1.0 + l2 + semi)


# --- stopping -------------------------------------------------------------

@dataclass(frozen=True)
class StoppingState:
    """Discrete stopping time: increments ``delta_tau`` taken so far."""

    dt: float
    delta_tau: tuple = ()
    active: bool = True
    stopped_at: int | None = None

    @property
    def tau_n(self) -> float:
        return float(sum(self.delta_tau))

    @property
    def n(self) -> int:
        return len(self.delta_tau)


def update_stopping(state: StoppingState, h1_norm_monitor: float, params: SchemeParams) -> StoppingState:
    """Feed the H1 monitor of ``m^n``; appends ``delta_tau_{n+1}``.

    Once the monitor reaches ``R`` every later increment is zero.
    """
    if not math.isfinite(h1_norm_monitor):
        raise ValueError("stopping monitor must be finite")
    active, stopped = state.active, state.stopped_at
    if active and h1_norm_monitor >= params.R:
        active, stopped = False, state.n
    inc = state.dt if active else 0.0
    return StoppingState(state.dt, state.delta_tau + (inc,), active, stopped)


def schedule_from_monitor(monitor: Sequence[float], R: float, N: int) -> np.ndarray:
    """Increments ``delta_tau_n / dt`` (0 or 1) for a level with ``N`` steps
    whose stopping time is read off a monitor sampled on a finer, nested grid.

    ``monitor[l]`` is the H1 norm at reference time index ``l``.
    """
    monitor = np.asarray(monitor)
    N_ref = len(monitor) - 1
    if N_ref % N:
        raise ValueError(f"level N={N} does not divide reference N={N_ref}")
    hits = np.flatnonzero(monitor >= R)
    l_stop = int(hits[0]) if hits.size else N_ref
    r = N_ref // N
    n = np.arange(1, N + 1)
    return (n * r <= l_stop).astype(float)


def stopping_violations(delta_tau: Sequence[float], dt: float, fields=None) -> list[str]:
    """Check delta_tau in {0, dt}, nonincreasing, and frozen fields after stopping."""
    out = []
    d = np.asarray(delta_tau, dtype=float)
    if not np.all((d == 0.0) | (d == dt)):
        out.append("delta_tau not in {0, dt}")
    if np.any(np.diff(d) > 0):
        out.append("delta_tau increases")
    if fields is not None:
        for n, inc in enumerate(d, start=1):
            if inc == 0.0 and not np.array_equal(fields[n], fields[n - 1]):
                out.append(f"field changes after stopping at step {n}")
                break
    return out


# --- trajectories ---------------------------------------------------------

class StepFailure(RuntimeError):
    def __init__(self, step_index: int, cause: Exception):
        super().__init__(f"step {step_index} failed: {cause}")
        self.step_index = step_index
        self.cause = cause


@dataclass
class TrajectoryRecord:
    params: SchemeParams
    fields: list = field(default_factory=list)  # coefficient arrays m^(0..N)
    delta_tau: np.ndarray | None = None
    h1_norms: np.ndarray | None = None
    energy_residuals: np.ndarray | None = None
    energy_tolerances: np.ndarray | None = None
    stopped_at: int | None = None
    space: FeSpace | None = None

    @property
    def times(self) -> np.ndarray:
        return self.params.dt * np.arange(self.params.N + 1)

    def field(self, n: int) -> Field:
        return Field(self.space, self.fields[n])

    def write_csv(self, out: TextIO, header: str | None = None) -> None:
        if header:
            out.write(header.rstrip("\n") + "\n")
        out.write("step,t,delta_tau,h1_norm,energy_residual\n")
        dtau = np.concatenate([[0.0], self.delta_tau])
        for n in range(self.params.N + 1):
            out.write(
                f"{n},{self.times[n]:.17g},{dtau[n]:.17g},"
                f"{self.h1_norms[n]:.17g},{self.energy_residuals[n]:.17g}\n"
            )


def _h1(space: FeSpace, coeffs: np.ndarray) -> float:
    l2, semi = quadratic_forms(space, coeffs)
    return math.sqrt(max(l2, 0.0) + semi)


def run_trajectory(
    m0: Callable | Field,
    increments: np.ndarray,
    params: SchemeParams,
    space: FeSpace,
    modes: NoiseModes,
    *,
    schedule: np.ndarray | None = None,
    ops: StepOperators | None = None,
    keep_fields: bool = True,
    check_energy: bool = True,
) -> TrajectoryRecord:
    """Run ``params.N`` steps from ``P_h m0``.

    ``increments`` has shape (K, N). Without ``schedule`` the stopping time
    comes from this trajectory's own H1 monitor and ``params.R``; with it,
    ``schedule[n-1]`` in {0, 1} is the prescribed ``delta_tau_n / dt``.
    """
    params.check_dimension(space.dimension)
    increments = np.asarray(increments, dtype=float)
    if increments.ndim != 2 or increments.shape[0] != len(modes):
        raise ValueError(f"increments must have shape ({len(modes)}, N), got {increments.shape}")
    if increments.shape[1] != params.N:
        raise ValueError(f"increments have {increments.shape[1]} columns, expected N={params.N}")
    ops = build_operators(space) if ops is None else ops
    m = m0 if isinstance(m0, Field) else l2_project(m0, space)
    dt, N = params.dt, params.N

    fields = [m.coeffs]
    h1 = np.empty(N + 1)
    res = np.zeros(N + 1)
    tols = np.zeros(N + 1)
    h1[0] = _h1(space, m.coeffs)
    state = StoppingState(dt)
    for n in range(1, N + 1):
        if schedule is None:
            state = update_stopping(state, h1[n - 1], params)
            dtau = state.delta_tau[-1]
        else:
            dtau = dt * float(schedule[n - 1])
            stopped = state.stopped_at
            if dtau == 0 and stopped is None:
                stopped = n - 1
            state = StoppingState(dt, state.delta_tau + (dtau,), dtau > 0, stopped)
        try:
            m_new = step(m, dtau, increments[:, n - 1], params, ops, modes)
            if check_energy and dtau > 0:
                res[n] = energy_identity_residual(m, m_new, dtau, increments[:, n - 1], params, ops, modes)
                tols[n] = energy_tolerance(m_new)
        except (SolverError, ValueError, FloatingPointError) as exc:
            raise StepFailure(n, exc) from exc
        m = m_new
        fields.append(m.coeffs)
        h1[n] = h1[n - 1] if dtau == 0 else _h1(space, m.coeffs)
        if not math.isfinite(h1[n]):
            raise StepFailure(n, FloatingPointError("non-finite H1 norm"))
        if not keep_fields:
            fields[-2] = None
    if not keep_fields:
        fields = [f for f in fields if f is not None]
    return TrajectoryRecord(
        params=params,
        fields=fields,
        delta_tau=np.array(state.delta_tau),
        h1_norms=h1,
        energy_residuals=res,
        energy_tolerances=tols,
        stopped_at=state.stopped_at,
        space=space,
    )


def stability_functional(rec: TrajectoryRecord, ops: StepOperators | None = None) -> float:
    """``max_n |m^n|^2 + sum_j (|m^j|^2_H1 + eps |Delta m^j|^2) dtau_j`` of one trajectory."""
    ops = build_operators(rec.space) if ops is None else ops
    eps = rec.params.epsilon
    top, acc = 0.0, 0.0
    for n, c in enumerate(rec.fields):
        l2, semi = quadratic_forms(rec.space, c)
        top = max(top, l2)
        if n > 0:
            acc += (l2 + semi + (eps * ops.form("bilaplacian", c) if eps else 0.0)) * rec.delta_tau[n - 1]
    return top + acc
