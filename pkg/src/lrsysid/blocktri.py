"""Symmetric block-tridiagonal matrices.

A matrix is given by its diagonal blocks ``D[t]`` (shape ``(T, n, n)``) and
sub-diagonal blocks ``S[t]`` sitting at block position ``(t+1, t)`` (shape
``(T-1, n, n)``). Right-hand sides are stacked as ``(T, n, k)`` arrays.
"""

from __future__ import annotations

import numpy as np
from scipy import linalg

__all__ = ["BlockTriCholesky", "matvec", "to_dense"]


def matvec(D, S, X):
    """``M @ X`` for ``X`` of shape ``(T, n, k)``."""
    out = np.matmul(D, X)
    if X.shape[0] > 1:
        out[1:] += np.matmul(S, X[:-1])
        out[:-1] += np.matmul(np.swapaxes(S, -1, -2), X[1:])
    return out


def to_dense(D, S):
    T, n, _ = D.shape
    M = np.zeros((T * n, T * n))
    for t in range(T):
        M[t * n:(t + 1) * n, t * n:(t + 1) * n] = D[t]
        if t < T - 1:
            M[(t + 1) * n:(t + 2) * n, t * n:(t + 1) * n] = S[t]
            M[t * n:(t + 1) * n, (t + 1) * n:(t + 2) * n] = S[t].T
    return M


class BlockTriCholesky:
    """Block Cholesky factor ``M = L L'`` with ``L`` block lower-bidiagonal.

    Raises :class:`numpy.linalg.LinAlgError` when ``M`` is not positive definite.
    """

    def __init__(self, D, S):
        T, n, _ = D.shape
        self.T, self.n = T, n
        self.Ld = np.empty((T, n, n))
        self.Ls = np.empty((max(T - 1, 0), n, n))
        self.Ld[0] = np.linalg.cholesky(D[0])
        for t in range(1, T):
            self.Ls[t - 1] = linalg.solve_triangular(self.Ld[t - 1], S[t - 1].T, lower=True).T
            self.Ld[t] = np.linalg.cholesky(D[t] - self.Ls[t - 1] @ self.Ls[t - 1].T)
        self.Ldinv = np.linalg.inv(self.Ld)

    def logdet(self):
        return 2.0 * float(np.log(np.diagonal(self.Ld, axis1=1, axis2=2)).sum())

    def solve_lower(self, Z):
        """``L^-1 Z``."""
        Y = np.empty_like(Z)
        Y[0] = self.Ldinv[0] @ Z[0]
        for t in range(1, self.T):
            Y[t] = self.Ldinv[t] @ (Z[t] - self.Ls[t - 1] @ Y[t - 1])
        return Y

    def solve_upper(self, Y):
        """``L'^-1 Y``."""
        X = np.empty_like(Y)
        X[-1] = self.Ldinv[-1].T @ Y[-1]
        for t in range(self.T - 2, -1, -1):
            X[t] = self.Ldinv[t].T @ (Y[t] - self.Ls[t].T @ X[t + 1])
        return X

    def solve(self, Z):
        return self.solve_upper(self.solve_lower(Z))
