"""Structured meshes on intervals and rectangles, with dyadic refinement.

Meshes are immutable after construction. A refined mesh keeps a link to the
mesh it came from plus a child-to-parent cell map, which is all the
prolongation code needs to interpolate exactly between nested levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class Mesh:
    """Interval (``dimension == 1``) or triangle (``dimension == 2``) mesh.

    Attributes
    ----------
    dimension : int
    vertices : ndarray, shape (n_vertices, dimension)
    cells : ndarray of int, shape (n_cells, dimension + 1)
        Vertex indices; triangles are counter-clockwise.
    h : float
        Largest cell diameter.
    parent : Mesh or None
        Coarser mesh this one was refined from.
    parent_cell : ndarray of int or None
        ``parent_cell[c]`` is the parent-mesh cell containing child cell ``c``.
    """

    dimension: int
    vertices: np.ndarray
    cells: np.ndarray
    h: float
    parent: Mesh | None = None
    parent_cell: np.ndarray | None = None
    extent: tuple = field(default=())

    def __post_init__(self):
        for arr in (self.vertices, self.cells, self.parent_cell):
            if arr is not None:
                arr.flags.writeable = False

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_cells(self) -> int:
        return self.cells.shape[0]

    def cell_measures(self) -> np.ndarray:
        v = self.vertices[self.cells]
        if self.dimension == 1:
            return v[:, 1, 0] - v[:, 0, 0]
        e1 = v[:, 1] - v[:, 0]
        e2 = v[:, 2] - v[:, 0]
        return 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])

    def measure(self) -> float:
        return float(self.cell_measures().sum())

    def descends_from(self, other: Mesh) -> int | None:
        """Number of refinements separating ``self`` from ``other``, or None."""
        depth, mesh = 0, self
        while mesh is not None:
            if mesh is other:
                return depth
            mesh, depth = mesh.parent, depth + 1
        return None


def _check_positive(**values):
    for name, value in values.items():
        if not value > 0:
            raise ValueError(f"{name} must be positive, got {value!r}")


def build_interval_mesh(length: float, n_cells: int) -> Mesh:
    """Uniform subdivision of ``[0, length]`` into ``n_cells`` intervals."""
    _check_positive(length=length, n_cells=n_cells)
    if int(n_cells) != n_cells:
        raise ValueError(f"n_cells must be an integer, got {n_cells!r}")
    n_cells = int(n_cells)
    x = np.linspace(0.0, length, n_cells + 1)
    cells = np.column_stack([np.arange(n_cells), np.arange(1, n_cells + 1)])
    return Mesh(1, x[:, None], cells, length / n_cells, extent=(float(length),))


def build_structured_tri_mesh(lx: float, ly: float, nx: int, ny: int) -> Mesh:
    """Split ``[0,lx] x [0,ly]`` into ``nx*ny`` quads, each cut along the
    (0,0)-(1,1) diagonal into two counter-clockwise triangles."""
    _check_positive(lx=lx, ly=ly, nx=nx, ny=ny)
    nx, ny = int(nx), int(ny)
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    i, j = i.ravel(), j.ravel()
    v00 = j * (nx + 1) + i
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    cells = np.empty((2 * nx * ny, 3), dtype=np.int64)
    cells[0::2] = lower
    cells[1::2] = upper
    h = float(np.hypot(lx / nx, ly / ny))
    return Mesh(2, vertices, cells, h, extent=(float(lx), float(ly)))


def mesh_edges(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Unique edges of a triangle mesh.

    Returns ``(edges, cell_edges)`` where ``edges`` has shape (n_edges, 2)
    with sorted vertex pairs and ``cell_edges[c]`` lists the edge ids of
    local edges (0,1), (1,2), (2,0) of cell ``c``.
    """
    c = mesh.cells
    local = np.stack([c[:, [0, 1]], c[:, [1, 2]], c[:, [2, 0]]], axis=1)
    flat = np.sort(local.reshape(-1, 2), axis=1)
    edges, inverse = np.unique(flat, axis=0, return_inverse=True)
    return edges, inverse.reshape(-1, 3)


def _diameter(vertices: np.ndarray, cells: np.ndarray) -> float:
    v = vertices[cells]
    if vertices.shape[1] == 1:
        return float(np.max(v[:, 1, 0] - v[:, 0, 0]))
    lengths = [np.linalg.norm(v[:, a] - v[:, b], axis=1) for a, b in ((0, 1), (1, 2), (2, 0))]
    return float(np.max(lengths))


def refine(mesh: Mesh) -> Mesh:
    """Dyadic refinement: intervals halved, triangles split into four by
    their edge midpoints. The result links back to ``mesh``."""
    if mesh.dimension == 1:
        x = mesh.vertices[:, 0]
        n = mesh.n_cells
        new_x = np.empty(2 * n + 1)
        new_x[0::2] = x
        new_x[1::2] = 0.5 * (x[mesh.cells[:, 0]] + x[mesh.cells[:, 1]])
        cells = np.column_stack([np.arange(2 * n), np.arange(1, 2 * n + 1)])
        parent_cell = np.arange(2 * n) // 2
        vertices = new_x[:, None]
    else:
        edges, cell_edges = mesh_edges(mesh)
        nv = mesh.n_vertices
        mids = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
        vertices = np.vstack([mesh.vertices, mids])
        v0, v1, v2 = mesh.cells.T
        m01, m12, m20 = (nv + cell_edges).T
        children = np.stack(
            [
                np.column_stack([v0, m01, m20]),
                np.column_stack([m01, v1, m12]),
                np.column_stack([m20, m12, v2]),
                np.column_stack([m01, m12, m20]),
            ],
            axis=1,
        )
        cells = children.reshape(-1, 3)
        parent_cell = np.repeat(np.arange(mesh.n_cells), 4)
    return Mesh(
        mesh.dimension,
        vertices,
        cells,
        _diameter(vertices, cells),
        parent=mesh,
        parent_cell=parent_cell,
        extent=mesh.extent,
    )
