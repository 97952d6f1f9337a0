"""Linear solves for the coercive, nonsymmetric step systems."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import LinearOperator, gmres, splu

DENSE_LIMIT = 600
DEFAULT_TOL = 1e-10


class SolverError(RuntimeError):
    """Base class for solver failures."""


class NonConvergenceError(SolverError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


class NumericalFailure(SolverError):
    """Non-finite values met in a system, a right-hand side or a solution."""


def _relative_residual(A, x, b) -> float:
    nb = np.linalg.norm(b)
    r = np.linalg.norm(A @ x - b)
    return float(r / nb) if nb > 0 else float(r)


def solve_sparse(A, b, tol: float = DEFAULT_TOL, method: str = "auto", maxiter: int | None = None):
    """Solve ``A x = b`` to relative residual ``tol``.

    ``method`` is ``"dense"`` (LAPACK), ``"direct"`` (SuperLU), ``"gmres"``
    (Jacobi-preconditioned restarted GMRES, iteration cap ``10 n``) or
    ``"auto"``, which picks dense below 600 unknowns and SuperLU above.
    The residual is always checked after the solve.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    n = A.shape[0]
    if A.shape != (n, n) or b.shape[0] != n:
        raise ValueError(f"incompatible system: A {A.shape}, b {b.shape}")
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise NumericalFailure("right-hand side contains non-finite values")
    if method == "auto":
        method = "dense" if n < DENSE_LIMIT else "direct"

    if method == "dense":
        dense = A.toarray() if sp.issparse(A) else np.asarray(A)
        if not np.all(np.isfinite(dense)):
            raise NumericalFailure("system matrix contains non-finite values")
        try:
            x = np.linalg.solve(dense, b)
        except np.linalg.LinAlgError:
            x = np.linalg.lstsq(dense, b, rcond=None)[0]
    elif method == "direct":
        A = sp.csc_matrix(A)
        if not np.all(np.isfinite(A.data)):
            raise NumericalFailure("system matrix contains non-finite values")
        try:
            x = splu(A).solve(b)
        except RuntimeError as exc:  # exactly singular factor
            raise NonConvergenceError(f"sparse factorisation failed: {exc}", float("inf")) from exc
    elif method == "gmres":
        A = sp.csr_matrix(A)
        diag = A.diagonal()
        diag[diag == 0] = 1.0
        M = LinearOperator(A.shape, matvec=lambda v: v / diag)
        restart = min(n, 50)
        maxiter = 10 * n if maxiter is None else maxiter
        # scipy counts restart cycles, not inner iterations
        cycles = max(1, -(-maxiter // restart))
        x, _ = gmres(A, b, rtol=tol * 0.5, atol=0.0, restart=restart, maxiter=cycles, M=M)
    else:
        raise ValueError(f"unknown method {method!r}")

    if not np.all(np.isfinite(x)):
        raise NumericalFailure("solution contains non-finite values")
    res = _relative_residual(A, x, b)
    if not res <= tol:
        raise NonConvergenceError(f"{method} solve did not reach tol={tol:g}", res)
    return x
