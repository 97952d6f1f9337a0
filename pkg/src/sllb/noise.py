"""Truncated Wiener noise ``W(t) = sum_k g_k W_k(t)`` and its load vectors.

Each mode is ``g_k = sigma k^{-s} cos(k pi x_1 / L) e_{(k mod 3) + 1}``: a
Neumann eigenfunction profile (constant in ``x_2`` on rectangles) times a
fixed direction. Brownian increments come from a counter-based generator
keyed by (seed, mode), so a path never depends on execution order.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .fem import Field, quadrature_points
from .mesh import Mesh

# test hook: flips the sign of the Stratonovich correction load
_STRAT_SIGN = 1.0


@contextlib.contextmanager
def flipped_stratonovich_sign():
    """Deliberately corrupt the Stratonovich load (fault-injection runs)."""
    global _STRAT_SIGN
    _STRAT_SIGN = -1.0
    try:
        yield
    finally:
        _STRAT_SIGN = 1.0


@dataclass(frozen=True)
class CosineProfile:
    k: int
    length: float

    def __call__(self, x1):
        return np.cos(self.k * np.pi * np.asarray(x1) / self.length)


@dataclass(frozen=True, eq=False)
class NoiseMode:
    index: int
    amplitude: float
    direction: np.ndarray
    profile: CosineProfile
    field_values: np.ndarray  # (cells, q, 3) at the target mesh's quadrature nodes

    def vector_at(self, points) -> np.ndarray:
        """``g_k`` at points of shape (n, d), returned as (n, 3)."""
        p = np.asarray(points, dtype=float).reshape(-1, np.asarray(points).shape[-1])
        return self.amplitude * self.profile(p[:, 0])[:, None] * self.direction[None, :]


class NoiseModes:
    """Immutable collection of modes sharing one target mesh."""

    def __init__(self, modes, tail_bound: float, mesh: Mesh | None, decay: float, sigma: float):
        self.modes = tuple(modes)
        self.tail_bound = tail_bound
        self.mesh = mesh
        self.decay = decay
        self.sigma = sigma
        if self.modes:
            self.values = np.stack([m.field_values for m in self.modes])
        else:
            self.values = None

    def __len__(self):
        return len(self.modes)

    def __iter__(self):
        return iter(self.modes)

    def __getitem__(self, i):
        return self.modes[i]


def _term(k, s, sigma):
    k = np.asarray(k, dtype=float)
    return sigma**2 * k ** (-2.0 * s) * (1.0 + k * k) ** 3


def tail_bound(K: int, s: float, sigma: float, n_direct: int = 10_000) -> float:
    """Upper bound on ``sum_{k>K} a_k^2 (1 + k^2)^3`` with ``a_k = sigma k^{-s}``.

    Sums ``n_direct`` terms explicitly and bounds the rest by an integral of
    the (decreasing) summand.
    """
    if s <= 3.5:
        raise ValueError(
            f"decay exponent s={s} must exceed 7/2 so that sum a_k^2 (1+k^2)^3 is finite"
        )
    k0 = K + n_direct
    direct = float(np.sum(_term(np.arange(K + 1, k0 + 1), s, sigma)))
    rest = sigma**2 * (1.0 + 1.0 / k0**2) ** 3 * k0 ** (7.0 - 2.0 * s) / (2.0 * s - 7.0)
    return direct + rest


def build_modes(K: int, s: float = 4.0, sigma: float = 0.5, mesh: Mesh | None = None) -> NoiseModes:
    """The first ``K`` modes, with values cached at ``mesh``'s quadrature nodes."""
    if K < 0:
        raise ValueError("K must be non-negative")
    bound = tail_bound(K, s, sigma)
    points = quadrature_points(mesh) if mesh is not None else None
    length = mesh.extent[0] if mesh is not None else 1.0
    modes = []
    for k in range(1, K + 1):
        direction = np.zeros(3)
        direction[k % 3] = 1.0
        profile = CosineProfile(k, length)
        amp = sigma * k ** (-s)
        if points is not None:
            vals = amp * profile(points[..., 0])[..., None] * direction
        else:
            vals = np.zeros((0, 0, 3))
        vals.flags.writeable = False
        modes.append(NoiseMode(k, amp, direction, profile, vals))
    return NoiseModes(modes, bound, mesh, s, sigma)


# --- Brownian paths -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class WienerPath:
    seed: int
    n_fine: int
    dt_fine: float
    dW: np.ndarray  # (K, n_fine)

    @property
    def K(self) -> int:
        return self.dW.shape[0]


def mode_generator(seed: int, k: int) -> np.random.Generator:
    """Philox stream for mode ``k``; draw ``j`` is the increment of step ``j``."""
    key = (int(seed) % 2**64) + (int(k) << 64)
    return np.random.Generator(np.random.Philox(key=key))


def sample_path(seed: int, K: int, n_fine: int, dt_fine: float) -> WienerPath:
    if n_fine < 1 or not dt_fine > 0:
        raise ValueError("need n_fine >= 1 and dt_fine > 0")
    dW = np.empty((K, n_fine))
    scale = np.sqrt(dt_fine)
    for k in range(K):
        dW[k] = scale * mode_generator(seed, k + 1).standard_normal(n_fine)
    dW.flags.writeable = False
    return WienerPath(int(seed), int(n_fine), float(dt_fine), dW)


def aggregate_increments(path: WienerPath | np.ndarray, coarsening: int) -> np.ndarray:
    """Sum consecutive blocks of ``coarsening`` fine increments."""
    dW = path.dW if isinstance(path, WienerPath) else np.asarray(path)
    K, n = dW.shape
    if coarsening < 1 or n % coarsening:
        raise ValueError(f"coarsening {coarsening} does not divide n_fine={n}")
    return dW.reshape(K, n // coarsening, coarsening).sum(axis=2)


# --- load vectors ---------------------------------------------------------

def stratonovich_field(m_q: np.ndarray, modes: NoiseModes, gamma: float = 1.0) -> np.ndarray:
    """``1/2 gamma^2 sum_k (m x g_k) x g_k`` at the nodes."""
    if not len(modes):
        return np.zeros_like(m_q)
    G = modes.values
    # (m x g) x g = (m.g) g - |g|^2 m
    mg = np.einsum("cqi,kcqi->kcq", m_q, G)
    gg = np.einsum("kcqi,kcqi->cq", G, G)
    f = np.einsum("kcq,kcqi->cqi", mg, G) - gg[..., None] * m_q
    return 0.5 * gamma**2 * f


def stratonovich_load(m: Field, modes: NoiseModes, gamma: float = 1.0) -> np.ndarray:
    """``1/2 sum_k <(m x g_k) x g_k, phi>`` for every test function."""
    space = m.space
    f = stratonovich_field(space.values_at_quad(m.coeffs), modes, gamma)
    return _STRAT_SIGN * space.load(f)


def diffusion_field(m_q: np.ndarray, modes: NoiseModes, dWn, kappa1: float = 1.0, gamma: float = 1.0):
    """``sum_k dW_k (kappa1 g_k + gamma m x g_k)`` at the nodes."""
    if not len(modes):
        return np.zeros_like(m_q)
    W = np.einsum("k,kcqi->cqi", np.asarray(dWn, dtype=float), modes.values)
    return kappa1 * W + gamma * np.cross(m_q, W)


def diffusion_load(m: Field, modes: NoiseModes, dWn, kappa1: float = 1.0, gamma: float = 1.0) -> np.ndarray:
    """``sum_k dW_k <g_k + m x g_k, phi>`` for every test function."""
    space = m.space
    return space.load(diffusion_field(space.values_at_quad(m.coeffs), modes, dWn, kappa1, gamma))
