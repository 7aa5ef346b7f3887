"""GLS coefficients, hat matrices and BLUP predictions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .model import RANK_TOL, CovarianceBundle, DesignData

__all__ = ["GlsEstimate", "HatPair", "gls_fit", "hat_matrices"]


@dataclass(frozen=True)
class GlsEstimate:
    beta_hat: np.ndarray
    var_beta_hat: np.ndarray

    @property
    def fisher_information(self) -> np.ndarray:
        return np.linalg.inv(self.var_beta_hat)


@dataclass(frozen=True)
class HatPair:
    """Linear maps from ``y`` to fitted values (``H``) and predictions (``H_star``).

    ``X``/``X_star`` are the fixed-effect designs the hats were built for; the
    criteria use them to check ``H X = X`` and ``H_star X = X_star``.
    """

    H: np.ndarray
    H_star: np.ndarray
    f_hat: np.ndarray
    f_star_hat: np.ndarray
    X: np.ndarray
    X_star: np.ndarray

    @classmethod
    def from_matrices(cls, H, H_star, y, X, X_star) -> "HatPair":
        H = np.asarray(H, dtype=float)
        H_star = np.asarray(H_star, dtype=float)
        y = np.asarray(y, dtype=float)
        return cls(H, H_star, H @ y, H_star @ y, np.asarray(X, float), np.asarray(X_star, float))

    def scaled(self, factor: float) -> "HatPair":
        return HatPair(
            factor * self.H, factor * self.H_star, factor * self.f_hat, factor * self.f_star_hat, self.X, self.X_star
        )

    def bias_residuals(self) -> tuple[float, float]:
        """Max-abs of ``H X - X`` and ``H_star X - X_star``."""
        return (
            float(np.abs(self.H @ self.X - self.X).max()),
            float(np.abs(self.H_star @ self.X - self.X_star).max()),
        )

    def is_unbiased(self, tol: float = 1e-6) -> bool:
        scale = max(1.0, float(np.abs(self.X).max()), float(np.abs(self.X_star).max()))
        return max(self.bias_residuals()) <= tol * scale


def _weighted_crossproduct(data: DesignData, bundle: CovarianceBundle):
    if bundle.n != data.n or bundle.n_star != data.n_star:
        raise ValueError("bundle and design sizes differ")
    Vinv_X = bundle.chol_V.solve(data.X)
    XtViX = data.X.T @ Vinv_X
    XtViX = 0.5 * (XtViX + XtViX.T)
    s = np.linalg.svd(XtViX, compute_uv=False)
    if s[-1] < RANK_TOL * s[0]:
        raise ValueError("singular design: X'V^-1X is rank deficient")
    return Vinv_X, XtViX


def gls_fit(data: DesignData, bundle: CovarianceBundle) -> GlsEstimate:
    """``beta_hat = (X'V^-1X)^-1 X'V^-1 y`` and its covariance."""
    Vinv_X, XtViX = _weighted_crossproduct(data, bundle)
    cf = cho_factor(XtViX, lower=True)
    var_beta = cho_solve(cf, np.eye(data.p))
    beta = cho_solve(cf, Vinv_X.T @ data.y)
    return GlsEstimate(beta, 0.5 * (var_beta + var_beta.T))


def hat_matrices(data: DesignData, bundle: CovarianceBundle, est: Optional[GlsEstimate] = None) -> HatPair:
    """Hat matrices of the BLUPs.

    With ``A = (X'V^-1X)^-1 X'V^-1`` and ``P = X A``::

        H      = P + Cov(y_new, y) V^-1 (I - P)
        H_star = X_star A + C V^-1 (I - P)

    where ``Cov(y_new, y)`` is ``bundle.cov_new`` (``V - R`` in residual mode).
    Both are evaluated in the equivalent forms

        H      = I - D + (D X) A,          D = (V - Cov(y_new, y)) V^-1
        H_star = X_star A + B - (B X) A,   B = C V^-1

    which keep ``H X = X`` and ``H_star X = X_star`` to rounding error even
    when ``V`` is nearly singular (tiny nugget, dense kernel inputs): there
    ``V^-1 (I - P)`` is huge and the direct product cancels badly.
    """
    Vinv_X, _ = _weighted_crossproduct(data, bundle)
    if est is None:
        est = gls_fit(data, bundle)
    X, X_star = data.X, data.X_star
    A = est.var_beta_hat @ Vinv_X.T  # maps y to beta_hat
    D = bundle.chol_V.solve(bundle.residual).T
    H = np.eye(data.n) - D + (D @ X) @ A
    B = bundle.chol_V.solve(bundle.C.T).T
    H_star = X_star @ A + B - (B @ X) @ A
    return HatPair(H, H_star, H @ data.y, H_star @ data.y, np.array(X), np.array(X_star))
