"""Built-in property suite behind ``sllb validate``.

Each check returns ``(name, passed, detail)``. Every trajectory run here is
also screened for stopping-time invariants.
"""

from __future__ import annotations

import math

import numpy as np

from . import galerkin
from .fem import FeSpace, Field, assemble_cross_convection, assemble_mass, assemble_stiffness
from .harness import ExperimentPlan, ModelConfig, run_coupled_study, run_path
from .mesh import build_interval_mesh, build_structured_tri_mesh
from .noise import build_modes, sample_path
from .scheme import SchemeParams, build_operators, run_trajectory, stopping_violations


def riccati(t, y0=1.0):
    """``|m|^2`` for constant data with ``kappa2 = mu = 1`` and no noise."""
    e = np.exp(-2.0 * np.asarray(t))
    return y0 * e / (1.0 + y0 * (1.0 - e))


class _Suite:
    def __init__(self):
        self.results = []
        self.trajectories = []

    def record(self, name, passed, detail=""):
        self.results.append((name, bool(passed), detail))

    def run(self, m0, inc, params, space, modes, **kw):
        rec = run_trajectory(m0, inc, params, space, modes, **kw)
        self.trajectories.append(rec)
        return rec


def _assembly(s: _Suite, rng):
    n = 10
    h = 1.0 / n
    space = FeSpace(build_interval_mesh(1.0, n))
    M = assemble_mass(space).toarray()[:n + 1, :n + 1]
    K = assemble_stiffness(space).toarray()[:n + 1, :n + 1]
    err = max(np.abs(M[5, 4:7] - h / 6 * np.array([1, 4, 1])).max(),
              np.abs(K[5, 4:7] - np.array([-1, 2, -1]) / h).max())
    s.record("assembly_p1_rows", err <= 1e-13, f"max row error {err:.2e}")

    p2 = FeSpace(build_structured_tri_mesh(1.0, 1.0, 4, 4))
    B = p2.scalar_csr(p2.bilaplacian_data)
    x, y = p2.dof_coords.T
    worst = 0.0
    for f in (np.ones_like(x), x, y, 2 * x - 3 * y + 1):
        worst = max(worst, np.abs(B @ f).max())
    s.record("bilaplacian_annihilates_p1", worst <= 1e-12, f"max |B u| {worst:.2e}")

    worst = 0.0
    for space in (FeSpace(build_interval_mesh(1.0, 8)), FeSpace(build_structured_tri_mesh(1.0, 1.0, 3, 3))):
        for _ in range(10):
            m_prev = Field(space, rng.standard_normal(space.n_dofs))
            C = assemble_cross_convection(m_prev)
            v = rng.standard_normal(space.n_dofs)
            worst = max(worst, abs(v @ (C @ v)) / max(1.0, v @ v))
    s.record("cross_convection_skew", worst <= 1e-12, f"max |x^T C x| {worst:.2e}")


def _energy(s: _Suite, rng):
    worst, n_steps = 0.0, 0
    cases = [
        (FeSpace(build_interval_mesh(1.0, 12)), 0.0),
        (FeSpace(build_structured_tri_mesh(1.0, 1.0, 3, 3)), 0.05),
    ]
    for space, eps in cases:
        ops = build_operators(space)
        for K in (0, 1, 4):
            modes = build_modes(K, 4.0, 1.0, space.mesh)
            params = SchemeParams(N=8, epsilon=eps)
            c = 0.5 * rng.standard_normal(space.n_dofs)
            inc = sample_path(int(rng.integers(2**31)), K, params.N, params.dt).dW
            rec = s.run(Field(space, c), inc, params, space, modes, ops=ops)
            ratio = rec.energy_residuals[1:] / rec.energy_tolerances[1:]
            worst = max(worst, ratio.max())
            n_steps += params.N
    s.record("energy_identity", worst <= 1.0, f"{n_steps} steps, worst residual/tol {worst:.2e}")


def _stopping(s: _Suite):
    space = FeSpace(build_interval_mesh(1.0, 16))
    modes = build_modes(4, 4.0, 2.0, space.mesh)
    inc = sample_path(3, 4, 32, 1 / 32).dW
    m0 = lambda p: np.column_stack([np.cos(np.pi * p[:, 0]), 0 * p[:, 0], 0.3 + 0 * p[:, 0]])
    for R in (0.0, 0.8, 1.2, math.inf):
        s.run(m0, inc, SchemeParams(N=32, R=R), space, modes)
    bad = []
    for k, rec in enumerate(s.trajectories):
        for msg in stopping_violations(rec.delta_tau, rec.params.dt, rec.fields):
            bad.append(f"trajectory {k}: {msg}")
    s.record("stopping_invariants", not bad,
             f"{len(s.trajectories)} trajectories" if not bad else "; ".join(bad[:3]))


def _coupling(s: _Suite):
    model = ModelConfig(noise_modes=2, stopping="fixed", R=1.0)
    a = run_path(ExperimentPlan(levels=((8, 16), (16, 32)), n_paths=1), model, 0)
    b = run_path(ExperimentPlan(levels=((16, 32), (16, 32)), n_paths=1), model, 0)
    self_zero = b[0][0] == 0 and b[1][0] == 0
    # the reference is the same in both plans; same target, same path
    rep = run_coupled_study(ExperimentPlan(levels=((16, 32), (16, 32)), n_paths=1), model)
    again = run_coupled_study(ExperimentPlan(levels=((16, 32), (16, 32)), n_paths=1), model)
    same = np.array_equal(rep.e_max_sq, again.e_max_sq) and np.all(a[0][:1] > 0)
    s.record("coupling_exactness", self_zero and same,
             f"self-comparison {b[0][0]:.1e}, reproducible {same}")


def _riccati(s: _Suite):
    space = FeSpace(build_interval_mesh(1.0, 4))
    modes = build_modes(0)
    errs = []
    for N in (8, 16, 32, 64):
        rec = s.run(lambda p: np.tile([1.0, 0.0, 0.0], (len(p), 1)), np.zeros((0, N)),
                    SchemeParams(N=N), space, modes)
        t = rec.times
        m1 = np.array([c.reshape(3, -1)[0].mean() for c in rec.fields])
        errs.append(np.abs(m1 - np.sqrt(riccati(t))).max())
    ratios = np.array(errs[:-1]) / np.array(errs[1:])
    s.record("riccati_oracle", np.all(np.abs(ratios - 2) <= 0.4), "error ratios " + ", ".join(f"{r:.3f}" for r in ratios))

    basis = galerkin.SpectralBasis(4)
    c = np.zeros((3, 4))
    c[0, 0] = 1.0
    gerrs = []
    for N in (8, 16, 32):
        states = galerkin.integrate(galerkin.SpectralState(basis, c), np.zeros((0, N)), SchemeParams(N=N), modes)
        t = np.linspace(0, 1, N + 1)
        gerrs.append(max(abs(st.coeffs[0, 0] - math.sqrt(y)) for st, y in zip(states, riccati(t))))
    gr = np.array(gerrs[:-1]) / np.array(gerrs[1:])
    s.record("galerkin_riccati", np.all(np.abs(gr - 2) <= 0.4), "error ratios " + ", ".join(f"{r:.3f}" for r in gr))


def _prng(s: _Suite):
    a = sample_path(11, 3, 64, 1 / 64).dW
    b = sample_path(11, 3, 64, 1 / 64).dW
    c = sample_path(11, 5, 32, 1 / 64).dW  # more modes, shorter path: shared prefix
    s.record("prng_counter_based", np.array_equal(a, b) and np.array_equal(a[:3, :32], c[:3]),
             "paths independent of request shape")


def run_suite(seed: int = 0) -> _Suite:
    """Run every check; the returned suite keeps results and trajectories."""
    rng = np.random.default_rng(seed)
    s = _Suite()
    _assembly(s, rng)
    _energy(s, rng)
    _riccati(s)
    _prng(s)
    _coupling(s)
    _stopping(s)  # last: screens every trajectory above
    return s


def run_validation(seed: int = 0) -> list[tuple[str, bool, str]]:
    return run_suite(seed).results
