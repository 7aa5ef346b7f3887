"""Factorization helpers shared by the covariance and criterion code."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

JITTER_LADDER = (0.0, 1e-12, 1e-10, 1e-8)


class NotPositiveDefiniteError(ValueError):
    pass


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower Cholesky factor of an SPD matrix, with the diagonal jitter used."""

    L: np.ndarray
    jitter: float = 0.0
    diagonal: bool = False

    @property
    def size(self) -> int:
        return self.L.shape[0]

    def _d(self, B):
        d = np.diag(self.L)
        return d if B.ndim == 1 else d[:, None]

    def solve(self, B: np.ndarray) -> np.ndarray:
        """Return ``A^{-1} B``."""
        if self.diagonal:
            return B / self._d(B) ** 2
        return cho_solve((self.L, True), B, check_finite=False)

    def half_solve(self, B: np.ndarray) -> np.ndarray:
        """Return ``L^{-1} B``; ``sum(half_solve(r)**2)`` is the quadratic form."""
        if self.diagonal:
            return B / self._d(B)
        return solve_triangular(self.L, B, lower=True, check_finite=False)

    def trace_solve(self, B: np.ndarray) -> float:
        """``tr(A^{-1} B)`` for square ``B``."""
        if self.diagonal:
            return float(np.sum(np.diag(B) / np.diag(self.L) ** 2))
        return float(np.trace(self.solve(B)))

    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))

    def quad(self, r: np.ndarray) -> float:
        z = self.half_solve(r)
        return float(z @ z)


def cholesky(A: np.ndarray, name: str = "matrix", ladder=JITTER_LADDER) -> tuple[np.ndarray, CholeskyFactor]:
    """Factor ``A``, walking the jitter ladder on failure.

    Jitter is relative to the mean diagonal. Returns the (possibly jittered)
    matrix along with its factor so callers keep the two consistent.
    """
    A = np.asarray(A, dtype=float)
    if A.shape[0] == 0:
        return A, CholeskyFactor(np.zeros((0, 0)))
    scale = float(np.mean(np.diag(A)))
    if not np.isfinite(scale) or scale <= 0:
        scale = 1.0
    for rel in ladder:
        amount = rel * scale
        M = A + amount * np.eye(A.shape[0]) if amount else A
        try:
            L = np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            continue
        return M, CholeskyFactor(L, amount)
    raise NotPositiveDefiniteError(f"covariance not positive definite: {name}")


def trace_of_product(A: np.ndarray, B: np.ndarray) -> float:
    """``tr(A @ B)`` without forming the product."""
    return float(np.einsum("ij,ji->", A, B))


def symmetrize(A: np.ndarray) -> np.ndarray:
    return 0.5 * (A + A.T)
