"""Finite element spaces, quadrature and sparse assembly.

Two element families are supported, matching the two regimes of the solver:
continuous P1 on intervals and continuous P2 on triangles. Vector fields in
R^3 are stored component-major: ``coeffs[i * n + a]`` is component ``i`` at
scalar dof ``a``.

All forms share one quadrature rule per dimension (3-point Gauss on
intervals, the 6-point degree-4 rule on triangles). Nonpolynomial weights are
evaluated pointwise at the quadrature nodes, so any check that re-evaluates a
form must go through the same node values exposed here.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, TextIO

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .mesh import Mesh, mesh_edges

# --- quadrature -----------------------------------------------------------

_GL_X, _GL_W = np.polynomial.legendre.leggauss(3)
# reference interval [0, 1]
LINE_POINTS = 0.5 * (_GL_X + 1.0)[:, None]
LINE_WEIGHTS = 0.5 * _GL_W

_A = (8.0 - np.sqrt(10.0) + np.sqrt(38.0 - 44.0 * np.sqrt(0.4))) / 18.0
_B = (8.0 - np.sqrt(10.0) - np.sqrt(38.0 - 44.0 * np.sqrt(0.4))) / 18.0
_WA = (620.0 + np.sqrt(213125.0 - 53320.0 * np.sqrt(10.0))) / 3720.0
_WB = (620.0 - np.sqrt(213125.0 - 53320.0 * np.sqrt(10.0))) / 3720.0
# reference triangle (0,0), (1,0), (0,1); weights sum to its area 1/2
TRI_POINTS = np.array(
    [[_A, _A], [1 - 2 * _A, _A], [_A, 1 - 2 * _A], [_B, _B], [1 - 2 * _B, _B], [_B, 1 - 2 * _B]]
)
TRI_WEIGHTS = 0.5 * np.array([_WA, _WA, _WA, _WB, _WB, _WB])


def _affine_maps(mesh: Mesh):
    """Per-cell affine maps ``x = x0 + J xi`` for the reference cell."""
    v = mesh.vertices[mesh.cells]
    x0 = v[:, 0]
    J = np.stack([v[:, k] - x0 for k in range(1, mesh.dimension + 1)], axis=-1)
    return x0, J


def quadrature_points(mesh: Mesh) -> np.ndarray:
    """Physical quadrature nodes, shape (n_cells, n_q, dimension)."""
    ref = LINE_POINTS if mesh.dimension == 1 else TRI_POINTS
    x0, J = _affine_maps(mesh)
    return x0[:, None, :] + np.einsum("cde,qe->cqd", J, ref)


# --- reference elements ---------------------------------------------------

def _p1_line(xi):
    x = xi[:, 0]
    values = np.column_stack([1 - x, x])
    grads = np.broadcast_to(np.array([[-1.0], [1.0]]), (len(x), 2, 1)).copy()
    return values, grads


_LAMBDA_GRADS = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
_P2_EDGES = ((0, 1), (1, 2), (2, 0))


def _p2_barycentric(lam):
    """P2 basis values from barycentric coordinates, shape (..., 6)."""
    verts = [lam[..., i] * (2 * lam[..., i] - 1) for i in range(3)]
    edges = [4 * lam[..., i] * lam[..., j] for i, j in _P2_EDGES]
    return np.stack(verts + edges, axis=-1)


def _p2_tri(xi):
    lam = np.column_stack([1 - xi[:, 0] - xi[:, 1], xi[:, 0], xi[:, 1]])
    values = _p2_barycentric(lam)
    G = _LAMBDA_GRADS
    grads = np.empty((len(xi), 6, 2))
    for i in range(3):
        grads[:, i] = (4 * lam[:, i] - 1)[:, None] * G[i]
    for e, (i, j) in enumerate(_P2_EDGES):
        grads[:, 3 + e] = 4 * (lam[:, i, None] * G[j] + lam[:, j, None] * G[i])
    return values, grads


def _p2_ref_hessians():
    G = _LAMBDA_GRADS
    H = np.empty((6, 2, 2))
    for i in range(3):
        H[i] = 4 * np.outer(G[i], G[i])
    for e, (i, j) in enumerate(_P2_EDGES):
        H[3 + e] = 4 * (np.outer(G[i], G[j]) + np.outer(G[j], G[i]))
    return H


# --- spaces and fields ----------------------------------------------------

class FeSpace:
    """Continuous Lagrange space: P1 on an interval mesh or P2 on triangles.

    Holds the cell-to-dof map, the quadrature geometry and the sparsity
    pattern shared by every scalar form. Instances are treated as immutable.
    """

    def __init__(self, mesh: Mesh, degree: int | None = None):
        if degree is None:
            degree = mesh.dimension
        if (mesh.dimension, degree) not in ((1, 1), (2, 2)):
            raise ValueError(
                f"degree {degree} is not supported in dimension {mesh.dimension}; "
                "use P1 on intervals and P2 on triangles"
            )
        self.mesh = mesh
        self.degree = degree
        x0, J = _affine_maps(mesh)
        det = J[:, 0, 0] if mesh.dimension == 1 else np.linalg.det(J)
        if np.any(det <= 0):
            raise ValueError("mesh has cells with non-positive measure")
        invJ = 1.0 / J if mesh.dimension == 1 else np.linalg.inv(J)

        if mesh.dimension == 1:
            self.cell_dofs = mesh.cells.copy()
            self.dof_coords = mesh.vertices.copy()
            ref_points, ref_weights = LINE_POINTS, LINE_WEIGHTS
            phi, ref_grads = _p1_line(ref_points)
        else:
            edges, cell_edges = mesh_edges(mesh)
            nv = mesh.n_vertices
            self.cell_dofs = np.hstack([mesh.cells, nv + cell_edges])
            mids = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
            self.dof_coords = np.vstack([mesh.vertices, mids])
            ref_points, ref_weights = TRI_POINTS, TRI_WEIGHTS
            phi, ref_grads = _p2_tri(ref_points)

        self.n_scalar_dofs = self.dof_coords.shape[0]
        self.n_local = self.cell_dofs.shape[1]
        self.phi = phi                                      # (q, a)
        self.weights = det[:, None] * ref_weights[None, :]  # (c, q)
        # grad phi = J^{-T} grad_ref phi
        self.grads = np.einsum("ced,qae->cqad", invJ, ref_grads)
        self.points = x0[:, None, :] + np.einsum("cde,qe->cqd", J, ref_points)
        self.cell_measure = det * (1.0 if mesh.dimension == 1 else 0.5)
        if degree == 2:
            H = np.einsum("ced,aef,cfg->cadg", invJ, _p2_ref_hessians(), invJ)
            self.laplacians = np.trace(H, axis1=2, axis2=3)  # (c, a), constant per cell
        else:
            self.laplacians = None
        self._build_pattern()

    @property
    def dimension(self) -> int:
        return self.mesh.dimension

    @property
    def n_dofs(self) -> int:
        return 3 * self.n_scalar_dofs

    def _build_pattern(self):
        n, d = self.n_scalar_dofs, self.cell_dofs
        rows = np.repeat(d, self.n_local, axis=1).ravel()
        cols = np.tile(d, (1, self.n_local)).ravel()
        keys = rows.astype(np.int64) * n + cols
        unique = np.unique(keys)
        self.indptr = np.searchsorted(unique // n, np.arange(n + 1)).astype(np.int64)
        self.indices = (unique % n).astype(np.int64)
        self._scatter = np.searchsorted(unique, keys)
        self.nnz = unique.size

        # 3x3 block pattern, every block on the scalar pattern
        row_of = np.repeat(np.arange(n), np.diff(self.indptr))
        e = np.arange(self.nnz)
        ii, kk, ee = np.meshgrid(np.arange(3), np.arange(3), e, indexing="ij")
        ii, kk, ee = ii.ravel(), kk.ravel(), ee.ravel()
        order = np.lexsort((ee, kk, row_of[ee], ii))
        self._block_perm = ((ii * 3 + kk) * self.nnz + ee)[order]
        self._block_indices = (kk * n + self.indices[ee])[order]
        self._block_indptr = np.concatenate([[0], np.cumsum(np.tile(3 * np.diff(self.indptr), 3))])

    # -- low-level assembly helpers --

    def scatter(self, local: np.ndarray) -> np.ndarray:
        """Sum cell matrices of shape (c, a, b) into scalar-pattern data."""
        return np.bincount(self._scatter, weights=local.ravel(), minlength=self.nnz)

    def scatter_symmetric(self, local: np.ndarray) -> np.ndarray:
        """As ``scatter``, averaging with the transpose so the result is bitwise symmetric."""
        return self.scatter(0.5 * (local + local.transpose(0, 2, 1)))

    def scalar_csr(self, data: np.ndarray) -> sp.csr_matrix:
        n = self.n_scalar_dofs
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(n, n))

    def block_csr(self, blocks: np.ndarray) -> sp.csr_matrix:
        """Build the 3n x 3n operator from scalar-pattern data ``blocks[i, k]``."""
        data = blocks.reshape(-1)[self._block_perm]
        N = self.n_dofs
        return sp.csr_matrix((data, self._block_indices, self._block_indptr), shape=(N, N))

    def values_at_quad(self, coeffs: np.ndarray) -> np.ndarray:
        """Field values at quadrature nodes, shape (c, q, 3)."""
        local = coeffs.reshape(3, -1)[:, self.cell_dofs]  # (3, c, a)
        return np.einsum("ica,qa->cqi", local, self.phi)

    def grads_at_quad(self, coeffs: np.ndarray) -> np.ndarray:
        """Field gradients at quadrature nodes, shape (c, q, 3, dimension)."""
        local = coeffs.reshape(3, -1)[:, self.cell_dofs]
        return np.einsum("ica,cqad->cqid", local, self.grads)

    def integrate(self, values: np.ndarray) -> float:
        """Quadrature of a scalar given at the nodes, shape (c, q)."""
        return float(np.sum(self.weights * values))

    def load(self, f_values: np.ndarray) -> np.ndarray:
        """Load vector ``<f, phi>`` for f given at nodes, shape (c, q, 3)."""
        local = np.einsum("cq,cqi,qa->ica", self.weights, f_values, self.phi)
        flat = self.cell_dofs.ravel()
        n = self.n_scalar_dofs
        return np.concatenate([np.bincount(flat, weights=local[i].ravel(), minlength=n) for i in range(3)])

    # -- cached constant forms (scalar-pattern data) --

    @cached_property
    def mass_data(self) -> np.ndarray:
        return self.scatter_symmetric(np.einsum("cq,qa,qb->cab", self.weights, self.phi, self.phi))

    @cached_property
    def stiffness_data(self) -> np.ndarray:
        return self.scatter_symmetric(np.einsum("cq,cqad,cqbd->cab", self.weights, self.grads, self.grads))

    @cached_property
    def bilaplacian_data(self) -> np.ndarray:
        if self.laplacians is None:
            raise ValueError("the elementwise bi-Laplacian needs a P2 space; P1 Hessians vanish")
        lap = self.laplacians
        return self.scatter_symmetric(self.cell_measure[:, None, None] * lap[:, :, None] * lap[:, None, :])

    @cached_property
    def mass_lu(self):
        return splu(self.scalar_csr(self.mass_data).tocsc())

    def weighted_stiffness_data(self, weight: np.ndarray) -> np.ndarray:
        return self.scatter_symmetric(np.einsum("cq,cq,cqad,cqbd->cab", self.weights, weight, self.grads, self.grads))

    def weighted_mass_data(self, weight: np.ndarray) -> np.ndarray:
        return self.scatter_symmetric(np.einsum("cq,cq,qa,qb->cab", self.weights, weight, self.phi, self.phi))


@dataclass(frozen=True, eq=False)
class Field:
    """R^3-valued finite element function, coefficients component-major."""

    space: FeSpace
    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim != 1 or c.size != self.space.n_dofs:
            raise ValueError(f"expected {self.space.n_dofs} coefficients, got shape {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("field coefficients must be finite")
        object.__setattr__(self, "coeffs", c)

    @property
    def components(self) -> np.ndarray:
        return self.coeffs.reshape(3, -1)

    @classmethod
    def zeros(cls, space: FeSpace) -> Field:
        return cls(space, np.zeros(space.n_dofs))

    @classmethod
    def constant(cls, space: FeSpace, value) -> Field:
        value = np.asarray(value, dtype=float)
        return cls(space, np.repeat(value, space.n_scalar_dofs))

    @classmethod
    def interpolate(cls, space: FeSpace, f: Callable) -> Field:
        """Nodal interpolant of ``f(points) -> (n, 3)``."""
        return cls(space, np.asarray(f(space.dof_coords), dtype=float).T.ravel())


# --- public assembly ------------------------------------------------------

def _blockdiag(space: FeSpace, data: np.ndarray) -> sp.csr_matrix:
    return sp.kron(sp.identity(3, format="csr"), space.scalar_csr(data), format="csr")


def assemble_mass(space: FeSpace) -> sp.csr_matrix:
    """Blockwise mass matrix ``<u, phi>``."""
    return _blockdiag(space, space.mass_data)


def assemble_stiffness(space: FeSpace) -> sp.csr_matrix:
    """Blockwise stiffness ``<grad u, grad phi>`` (homogeneous Neumann)."""
    return _blockdiag(space, space.stiffness_data)


def assemble_bilaplacian(space: FeSpace) -> sp.csr_matrix:
    """Elementwise ``sum_T int_T lap(u) lap(phi)`` on P2; rejected for P1."""
    return _blockdiag(space, space.bilaplacian_data)


def cross_blocks(space: FeSpace, m_prev: np.ndarray) -> np.ndarray:
    """Scalar-pattern blocks of ``(m_prev x grad u, grad phi)``.

    Block (i, k) is ``sum_j eps_ijk S_j`` with ``S_j`` the stiffness weighted
    by ``m_prev_j``; antisymmetry in (i, k) makes ``x^T C x`` vanish exactly.
    """
    mq = space.values_at_quad(m_prev)
    S = [space.weighted_stiffness_data(mq[..., j]) for j in range(3)]
    blocks = np.zeros((3, 3, space.nnz))
    blocks[0, 1], blocks[1, 0] = -S[2], S[2]
    blocks[0, 2], blocks[2, 0] = S[1], -S[1]
    blocks[1, 2], blocks[2, 1] = -S[0], S[0]
    return blocks


def assemble_cross_convection(m_prev: Field) -> sp.csr_matrix:
    """Operator of the form ``int (m_prev x grad u) . grad phi``."""
    return m_prev.space.block_csr(cross_blocks(m_prev.space, m_prev.coeffs))


def weighted_mass_data(space: FeSpace, m_prev: np.ndarray, mu: float = 1.0) -> np.ndarray:
    mq = space.values_at_quad(m_prev)
    return space.weighted_mass_data(1.0 + mu * np.sum(mq * mq, axis=-1))


def assemble_weighted_mass(m_prev: Field, mu: float = 1.0) -> sp.csr_matrix:
    """Blockwise ``<(1 + mu |m_prev|^2) u, phi>``, weight taken at the nodes."""
    return _blockdiag(m_prev.space, weighted_mass_data(m_prev.space, m_prev.coeffs, mu))


# --- projections and norms ------------------------------------------------

def l2_project(f: Callable, space: FeSpace) -> Field:
    """L2-orthogonal projection of ``f(points) -> (n, 3)`` onto the space."""
    pts = space.points.reshape(-1, space.dimension)
    fq = np.asarray(f(pts), dtype=float).reshape(space.points.shape[:2] + (3,))
    rhs = space.load(fq).reshape(3, -1)
    coeffs = space.mass_lu.solve(np.ascontiguousarray(rhs.T)).T
    return Field(space, coeffs.ravel())


def _one_level_prolongation(coarse: FeSpace, fine: FeSpace) -> sp.csr_matrix:
    fmesh = fine.mesh
    parents = fmesh.parent_cell
    coords = fine.dof_coords[fine.cell_dofs]               # (cf, a, d)
    pverts = coarse.mesh.vertices[coarse.mesh.cells[parents]]
    if fmesh.dimension == 1:
        xi = (coords[..., 0] - pverts[:, None, 0, 0]) / (pverts[:, None, 1, 0] - pverts[:, None, 0, 0])
        vals = np.stack([1 - xi, xi], axis=-1)
    else:
        J = np.stack([pverts[:, 1] - pverts[:, 0], pverts[:, 2] - pverts[:, 0]], axis=-1)
        xi = np.einsum("cde,cae->cad", np.linalg.inv(J), coords - pverts[:, None, 0])
        lam = np.stack([1 - xi[..., 0] - xi[..., 1], xi[..., 0], xi[..., 1]], axis=-1)
        vals = _p2_barycentric(lam)
    vals[np.abs(vals) < 1e-14] = 0.0
    rows = np.repeat(fine.cell_dofs[:, :, None], coarse.n_local, axis=2)
    cols = np.repeat(coarse.cell_dofs[parents][:, None, :], fine.n_local, axis=1)
    # each fine dof is taken from the first cell that contains it
    _, first = np.unique(fine.cell_dofs.ravel(), return_index=True)
    cell_idx, local_idx = np.divmod(first, fine.n_local)
    r = rows[cell_idx, local_idx].ravel()
    c = cols[cell_idx, local_idx].ravel()
    v = vals[cell_idx, local_idx].ravel()
    keep = v != 0.0
    return sp.csr_matrix((v[keep], (r[keep], c[keep])), shape=(fine.n_scalar_dofs, coarse.n_scalar_dofs))


def prolongation_matrix(coarse: FeSpace, fine: FeSpace) -> sp.csr_matrix:
    """Scalar interpolation matrix from ``coarse`` to a nested ``fine`` space."""
    depth = fine.mesh.descends_from(coarse.mesh)
    if depth is None or coarse.degree != fine.degree:
        raise ValueError("fine space does not descend from the coarse space by refinement")
    P = sp.identity(coarse.n_scalar_dofs, format="csr")
    chain = [fine]
    while chain[-1].mesh is not coarse.mesh:
        parent_mesh = chain[-1].mesh.parent
        chain.append(coarse if parent_mesh is coarse.mesh else FeSpace(parent_mesh, fine.degree))
    for f, c in zip(reversed(chain[:-1]), reversed(chain[1:])):
        P = _one_level_prolongation(c, f) @ P
    return P.tocsr()


def prolongate(coarse: Field, fine_space: FeSpace, matrix: sp.csr_matrix | None = None) -> Field:
    """Exact interpolation of ``coarse`` into a nested finer space."""
    P = prolongation_matrix(coarse.space, fine_space) if matrix is None else matrix
    return Field(fine_space, (P @ coarse.components.T).T.ravel())


def quadratic_forms(space: FeSpace, coeffs: np.ndarray) -> tuple[float, float]:
    """Return ``(|u|^2_L2, |grad u|^2_L2)`` for a component-major vector."""
    # nodal quadrature is exact for these degrees and never goes negative
    vals = space.values_at_quad(coeffs)
    grads = space.grads_at_quad(coeffs)
    l2 = space.integrate(np.einsum("cqi,cqi->cq", vals, vals))
    semi = space.integrate(np.einsum("cqid,cqid->cq", grads, grads))
    return l2, semi


def norms(u: Field) -> tuple[float, float, float]:
    """``(l2, h1_semi, h1)`` norms of a field."""
    l2, semi = quadratic_forms(u.space, u.coeffs)
    l2 = max(l2, 0.0)
    return float(np.sqrt(l2)), float(np.sqrt(semi)), float(np.sqrt(l2 + semi))


# --- field dumps ----------------------------------------------------------

def write_field(out: TextIO, field: Field, **header) -> None:
    """Write the plain-text dump: a header line, then ``x [y] m1 m2 m3`` rows."""
    sp_ = field.space
    extra = "".join(f" {k}={v}" for k, v in header.items())
    out.write(f"llb-field dim={sp_.dimension} degree={sp_.degree} ndofs={sp_.n_scalar_dofs}{extra}\n")
    table = np.hstack([sp_.dof_coords, field.components.T])
    for row in table:
        out.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def read_field(inp: TextIO) -> tuple[dict, np.ndarray, np.ndarray]:
    """Parse a dump; returns ``(header, coords, values)``."""
    first = inp.readline().split()
    if not first or first[0] != "llb-field":
        raise ValueError("not an llb-field dump")
    header = dict(item.split("=", 1) for item in first[1:])
    dim, n = int(header["dim"]), int(header["ndofs"])
    table = np.loadtxt(inp, ndmin=2)
    if table.shape != (n, dim + 3):
        raise ValueError(f"expected {n} rows of {dim + 3} columns, got {table.shape}")
    return header, table[:, :dim], table[:, dim:]
