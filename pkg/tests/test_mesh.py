import numpy as np
import pytest

from sllb.mesh import build_interval_mesh, build_structured_tri_mesh, mesh_edges, refine


def test_interval_quarters():
    mesh = build_interval_mesh(1.0, 4)
    assert mesh.n_vertices == 5
    np.testing.assert_allclose(mesh.vertices[:, 0], [0, 0.25, 0.5, 0.75, 1.0])
    assert mesh.h == 0.25


def test_interval_single_cell():
    mesh = build_interval_mesh(1.0, 1)
    assert mesh.n_cells == 1
    np.testing.assert_allclose(mesh.vertices[mesh.cells[0], 0], [0.0, 1.0])


def test_interval_length_two():
    mesh = build_interval_mesh(2.0, 8)
    assert mesh.h == 0.25
    assert mesh.n_vertices == 9


@pytest.mark.parametrize("args", [(0.0, 4), (1.0, 0), (-1.0, 3)])
def test_interval_rejects_bad_input(args):
    with pytest.raises(ValueError):
        build_interval_mesh(*args)


def test_single_quad():
    mesh = build_structured_tri_mesh(1, 1, 1, 1)
    assert mesh.n_cells == 2 and mesh.n_vertices == 4
    assert mesh.h == pytest.approx(np.sqrt(2))


def test_two_by_two():
    mesh = build_structured_tri_mesh(1, 1, 2, 2)
    assert mesh.n_cells == 8 and mesh.n_vertices == 9


def test_area_partition():
    mesh = build_structured_tri_mesh(3, 2, 6, 4)
    assert np.all(mesh.cell_measures() > 0)
    assert mesh.measure() == pytest.approx(6.0, rel=1e-14)


def test_conforming_edges():
    # interior edges are shared by exactly two triangles, boundary edges by one
    mesh = build_structured_tri_mesh(1, 1, 3, 2)
    edges, cell_edges = mesh_edges(mesh)
    counts = np.bincount(cell_edges.ravel(), minlength=len(edges))
    assert set(np.unique(counts)) <= {1, 2}
    boundary_edges = np.sum(counts == 1)
    assert boundary_edges == 2 * (3 + 2)


def test_refine_interval_parents():
    fine = refine(build_interval_mesh(1.0, 4))
    assert fine.n_cells == 8
    np.testing.assert_array_equal(fine.parent_cell, np.repeat(np.arange(4), 2))


def test_refine_triangles_nested():
    coarse = build_structured_tri_mesh(2, 1, 2, 2)
    fine = refine(coarse)
    assert fine.n_cells == 4 * coarse.n_cells
    # children cover their parent exactly
    child_area = np.bincount(fine.parent_cell, weights=fine.cell_measures())
    np.testing.assert_allclose(child_area, coarse.cell_measures(), rtol=1e-14)
    assert fine.descends_from(coarse) == 1


def test_refine_twice_quarters_h():
    mesh = build_structured_tri_mesh(1, 1, 2, 2)
    assert refine(refine(mesh)).h == pytest.approx(mesh.h / 4, rel=1e-14)
    line = build_interval_mesh(1.0, 3)
    assert refine(refine(line)).h == pytest.approx(line.h / 4, rel=1e-14)
