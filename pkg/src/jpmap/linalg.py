"""Conjugate gradient for symmetric positive definite systems, via SciPy."""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .errors import NumericError

# restarts allowed when the recursive residual claims convergence but the true one disagrees
_RESTARTS = 3


def conjugate_gradient(matvec: Callable[[np.ndarray], np.ndarray], b: np.ndarray,
                       x0: np.ndarray | None = None, rtol: float = 1e-10,
                       max_iters: int | None = None) -> tuple[np.ndarray, int]:
    """Solve ``M x = b`` for SPD ``M`` given only ``matvec``.

    Convergence is confirmed on the true residual ``||b - M x|| <= rtol * ||b||``.
    Returns ``(x, iterations)``; raises :class:`NumericError` naming the final
    relative residual if the budget runs out.
    """
    b = np.asarray(b, dtype=np.float64)
    n = b.shape[0]
    if max_iters is None:
        max_iters = 10 * n
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return np.zeros(n), 0
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    op = LinearOperator((n, n), matvec=matvec, dtype=np.float64)
    iters = 0

    def count(_):
        nonlocal iters
        iters += 1

    for _ in range(_RESTARTS + 1):
        residual = np.linalg.norm(b - matvec(x)) / b_norm
        if residual <= rtol:
            return x, iters
        if iters >= max_iters:
            break
        x, info = cg(op, b, x0=x, rtol=rtol, atol=0.0, maxiter=max_iters - iters,
                     callback=count)
        if info < 0:
            raise NumericError(f"CG breakdown (scipy info {info})")
    raise NumericError(
        f"CG did not converge in {iters} iterations: "
        f"relative residual {residual:.3e} > {rtol:.1e}"
    )
