import numpy as np
import pytest
import scipy.sparse as sp

from sllb.fem import FeSpace, Field, assemble_mass, assemble_stiffness
from sllb.linalg import NonConvergenceError, NumericalFailure, solve_sparse
from sllb.mesh import build_interval_mesh
from sllb.scheme import SchemeParams, _system, build_operators


@pytest.fixture(scope="module")
def space():
    return FeSpace(build_interval_mesh(1.0, 16))


@pytest.mark.parametrize("method", ["dense", "direct", "gmres"])
def test_scaled_mass(space, method):
    M = 3.0 * assemble_mass(space)
    b = np.random.default_rng(0).standard_normal(space.n_dofs)
    x = solve_sparse(M, b, method=method)
    assert np.linalg.norm(M @ x - b) <= 1e-10 * np.linalg.norm(b)


@pytest.mark.parametrize("method", ["direct", "gmres"])
def test_step_systems_against_dense(space, method):
    ops = build_operators(space)
    rng = np.random.default_rng(1)
    b = rng.standard_normal(space.n_dofs)
    sym = (assemble_mass(space) + 0.1 * assemble_stiffness(space)).tocsr()
    nonsym = _system(rng.standard_normal(space.n_dofs), 0.1, SchemeParams(), ops)
    assert abs(nonsym - nonsym.T).max() > 1e-3
    for A in (sym, nonsym):
        oracle = np.linalg.solve(A.toarray(), b)
        np.testing.assert_allclose(solve_sparse(A, b, method=method), oracle, atol=1e-8)


@pytest.mark.parametrize("method", ["dense", "direct", "gmres"])
def test_incompatible_neumann_system(space, method):
    K = assemble_stiffness(space).tocsr()
    b = np.ones(space.n_dofs)  # not orthogonal to the constants
    with pytest.raises(NonConvergenceError):
        solve_sparse(K, b, method=method)


def test_auto_switches_to_sparse_direct():
    A = sp.identity(700, format="csr") * 2.0
    b = np.ones(700)
    np.testing.assert_allclose(solve_sparse(A, b), 0.5 * b)


def test_non_finite_inputs(space):
    M = assemble_mass(space)
    b = np.zeros(space.n_dofs)
    b[3] = np.inf
    with pytest.raises(NumericalFailure):
        solve_sparse(M, b)


def test_bad_arguments(space):
    M = assemble_mass(space)
    with pytest.raises(ValueError):
        solve_sparse(M, np.zeros(space.n_dofs), method="cg")
    with pytest.raises(ValueError):
        solve_sparse(M, np.zeros(3))
