"""Spectral Faedo-Galerkin reference integrator on an interval.

The state is expanded in the orthonormal Neumann-Laplacian eigenbasis
``e_0 = 1/sqrt(L)``, ``e_i = sqrt(2/L) cos(i pi x / L)``. Nonlinear terms are
evaluated pseudo-spectrally on a midpoint grid with twice as many points as
modes, which integrates every product of up to four basis functions exactly.

Time stepping mirrors the finite element scheme: drift-implicit with
coefficients lagged at the previous state, diffusion explicit.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

from .noise import NoiseModes
from .scheme import SchemeParams


@dataclass(frozen=True)
class SpectralBasis:
    n_modes: int
    length: float = 1.0
    oversample: int = 2

    @property
    def eigenvalues(self) -> np.ndarray:
        return (np.arange(self.n_modes) * np.pi / self.length) ** 2

    @property
    def grid(self) -> np.ndarray:
        Q = self.oversample * self.n_modes
        return (np.arange(Q) + 0.5) * self.length / Q

    @property
    def grid_weight(self) -> float:
        return self.length / (self.oversample * self.n_modes)

    def basis_values(self, x) -> np.ndarray:
        """``e_i(x)``, shape (len(x), n_modes)."""
        x = np.asarray(x, dtype=float)
        i = np.arange(self.n_modes)
        vals = np.sqrt(2.0 / self.length) * np.cos(np.outer(x, i) * np.pi / self.length)
        vals[:, 0] = 1.0 / np.sqrt(self.length)
        return vals

    def basis_gradients(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        i = np.arange(self.n_modes)
        k = i * np.pi / self.length
        return -np.sqrt(2.0 / self.length) * k * np.sin(np.outer(x, k))

    @property
    def Phi(self) -> np.ndarray:
        return _phi(self)

    def to_grid(self, coeffs: np.ndarray) -> np.ndarray:
        return coeffs @ self.Phi.T

    def from_grid(self, values: np.ndarray) -> np.ndarray:
        return self.grid_weight * values @ self.Phi


@lru_cache(maxsize=32)
def _phi(basis: SpectralBasis) -> np.ndarray:
    out = basis.basis_values(basis.grid)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class SpectralState:
    basis: SpectralBasis
    coeffs: np.ndarray  # (3, n_modes)

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.shape != (3, self.basis.n_modes):
            raise ValueError(f"expected coefficients of shape (3, {self.basis.n_modes}), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise FloatingPointError("spectral coefficients must be finite")
        object.__setattr__(self, "coeffs", c)

    @property
    def n_modes(self) -> int:
        return self.basis.n_modes

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.basis.eigenvalues

    def __call__(self, x) -> np.ndarray:
        """Pointwise values at ``x``, shape (len(x), 3)."""
        return (self.coeffs @ self.basis.basis_values(np.ravel(x)).T).T

    def gradient(self, x) -> np.ndarray:
        return (self.coeffs @ self.basis.basis_gradients(np.ravel(x)).T).T


def project_Pn(f: Callable, n_modes: int, length: float = 1.0, n_quad: int | None = None) -> SpectralState:
    """Cosine coefficients of ``f(points) -> (n, 3)`` by composite Gauss quadrature."""
    basis = SpectralBasis(n_modes, length)
    n_quad = max(4 * n_modes, 64) if n_quad is None else n_quad
    gx, gw = np.polynomial.legendre.leggauss(8)
    edges = np.linspace(0.0, length, n_quad + 1)
    half = 0.5 * np.diff(edges)
    x = (edges[:-1, None] + half[:, None] * (gx[None, :] + 1.0)).ravel()
    w = (half[:, None] * gw[None, :]).ravel()
    fx = np.asarray(f(x[:, None]), dtype=float).reshape(-1, 3)
    coeffs = (fx * w[:, None]).T @ basis.basis_values(x)
    return SpectralState(basis, coeffs)


def _mode_grid_values(basis: SpectralBasis, modes: NoiseModes) -> np.ndarray:
    """``g_k`` on the collocation grid, shape (K, 3, Q)."""
    x = basis.grid[:, None]
    return np.stack([m.vector_at(x).T for m in modes]) if len(modes) else np.zeros((0, 3, x.shape[0]))


def galerkin_rhs(state: SpectralState, params: SchemeParams, modes: NoiseModes):
    """Ito drift and per-mode diffusion coefficients of the Galerkin system.

    Returns ``(drift, diffusion)`` with shapes (3, n) and (K, 3, n).
    """
    b = state.basis
    lam = b.eigenvalues
    c = state.coeffs
    m = b.to_grid(c)                        # (3, Q)
    lap_m = b.to_grid(-lam * c)
    drift = -params.epsilon * lam**2 * c + params.kappa1 * (-lam * c)
    drift = drift + params.gamma * b.from_grid(np.cross(m, lap_m, axis=0))
    drift = drift - params.kappa2 * b.from_grid((1.0 + params.mu * np.sum(m * m, axis=0)) * m)
    G = _mode_grid_values(b, modes)
    if len(modes):
        mxg = np.cross(m[None], G, axis=1)
        strat = np.sum(np.cross(mxg, G, axis=1), axis=0)
        drift = drift + 0.5 * params.gamma**2 * b.from_grid(strat)
        diffusion = b.from_grid(params.kappa1 * G + params.gamma * mxg)
    else:
        diffusion = np.zeros((0, 3, b.n_modes))
    return drift, diffusion


def _implicit_matrix(basis: SpectralBasis, m_prev: np.ndarray, dt: float, params: SchemeParams) -> np.ndarray:
    """Matrix of ``c -> c + dt L(c)`` with L the lagged linear drift."""
    n = basis.n_modes
    lam = basis.eigenvalues
    Phi = basis.Phi
    w = basis.grid_weight
    A = np.zeros((3, n, 3, n))
    weight = 1.0 + params.mu * np.sum(m_prev * m_prev, axis=0)
    wmass = w * (Phi.T * weight) @ Phi
    lin = params.epsilon * lam**2 + params.kappa1 * lam
    for i in range(3):
        A[i, :, i, :] = np.eye(n) + dt * (np.diag(lin) + params.kappa2 * wmass)
    # -gamma Pi(m_prev x lap c): block (i, k) = -gamma sum_j eps_ijk Pi(m_j Phi (-lam) c_k)
    S = [w * (Phi.T * m_prev[j]) @ (Phi * -lam) for j in range(3)]
    for (i, j, k), sign in (((0, 1, 2), 1), ((0, 2, 1), -1), ((1, 2, 0), 1),
                             ((1, 0, 2), -1), ((2, 0, 1), 1), ((2, 1, 0), -1)):
        A[i, :, k, :] -= dt * params.gamma * sign * S[j]
    return A.reshape(3 * n, 3 * n)


def implicit_step(state: SpectralState, dW, dt: float, params: SchemeParams, modes: NoiseModes) -> SpectralState:
    b = state.basis
    m_prev = b.to_grid(state.coeffs)
    rhs = state.coeffs.copy()
    if len(modes):
        G = _mode_grid_values(b, modes)
        mxg = np.cross(m_prev[None], G, axis=1)
        strat = np.sum(np.cross(mxg, G, axis=1), axis=0)
        rhs += dt * 0.5 * params.gamma**2 * b.from_grid(strat)
        noise = np.einsum("k,kiq->iq", np.asarray(dW, dtype=float), params.kappa1 * G + params.gamma * mxg)
        rhs += b.from_grid(noise)
    A = _implicit_matrix(b, m_prev, dt, params)
    new = np.linalg.solve(A, rhs.ravel()).reshape(3, -1)
    return SpectralState(b, new)


def integrate(state0: SpectralState, increments, params: SchemeParams, modes: NoiseModes,
              n_substeps: int = 1) -> list[SpectralState]:
    """Integrate over ``[0, params.T]`` using every column of ``increments``
    (shape (K, n_fine)) as one substep; states are recorded every
    ``n_substeps`` substeps, so ``n_fine / n_substeps`` output intervals."""
    if n_substeps < 1:
        raise ValueError("n_substeps must be at least 1")
    inc = np.asarray(increments, dtype=float)
    if inc.ndim != 2 or inc.shape[0] != len(modes):
        raise ValueError(f"increments must have shape ({len(modes)}, n), got {inc.shape}")
    n_fine = inc.shape[1]
    if n_fine % n_substeps:
        raise ValueError(f"n_substeps={n_substeps} does not divide {n_fine} increments")
    dt = params.T / n_fine
    states = [state0]
    s = state0
    for j in range(n_fine):
        s = implicit_step(s, inc[:, j], dt, params, modes)
        if (j + 1) % n_substeps == 0:
            states.append(s)
    return states
