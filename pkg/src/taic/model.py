"""Covariance structures for Gaussian linear models and their realization.

A model is described declaratively by one of :class:`Lmm`, :class:`WeightedLmm`,
:class:`Gpr` or :class:`Gls`. :func:`realize` turns a description plus a
:class:`DesignData` into a :class:`CovarianceBundle` holding every matrix the
criteria need: the marginal covariances ``V`` and ``V_star``, the cross
covariance ``C = Cov(y*, y)``, and the residual covariances ``R`` and
``R_star`` entering the training and transductive likelihoods.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Union

import numpy as np
from scipy.spatial.distance import cdist

from ._linalg import CholeskyFactor, NotPositiveDefiniteError, cholesky, symmetrize

RANK_TOL = 1e-10
EIG_CLAMP_TOL = 1e-10
PSD_TOL = 1e-8

__all__ = [
    "DesignData",
    "SquaredExponential",
    "KernelSpec",
    "Lmm",
    "WeightedLmm",
    "Gpr",
    "Gls",
    "CovarianceSpec",
    "ResidualMode",
    "CovarianceBundle",
    "NotPositiveDefiniteError",
    "kernel_matrix",
    "realize",
]


def _as_matrix(a, name, rows=None) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a.reshape(-1, 1)
    if a.ndim != 2:
        raise ValueError(f"{name} must be a matrix, got shape {a.shape}")
    if rows is not None and a.shape[0] != rows:
        raise ValueError(f"{name} has {a.shape[0]} rows, expected {rows}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DesignData:
    """Training and prediction designs for one model.

    ``Z``/``Z_star`` hold random-effect columns for mixed models or input
    coordinates for kernel models; they may have zero columns. ``y_star`` is
    only present when held-out responses are available for evaluation.
    """

    y: np.ndarray
    X: np.ndarray
    X_star: np.ndarray
    Z: Optional[np.ndarray] = None
    Z_star: Optional[np.ndarray] = None
    y_star: Optional[np.ndarray] = None
    x_names: Optional[tuple] = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        n = y.shape[0]
        if n < 1:
            raise ValueError("training set is empty")
        X = _as_matrix(self.X, "X", n)
        X_star = _as_matrix(self.X_star, "X_star")
        n_star = X_star.shape[0]
        if n_star < 1:
            raise ValueError("prediction set is empty")
        if X.shape[1] < 1:
            raise ValueError("X needs at least one column")
        if X_star.shape[1] != X.shape[1]:
            raise ValueError(f"X has {X.shape[1]} columns but X_star has {X_star.shape[1]}")
        Z = np.zeros((n, 0)) if self.Z is None else _as_matrix(self.Z, "Z", n)
        Z_star = np.zeros((n_star, 0)) if self.Z_star is None else _as_matrix(self.Z_star, "Z_star", n_star)
        if Z.shape[1] != Z_star.shape[1]:
            raise ValueError(f"Z has {Z.shape[1]} columns but Z_star has {Z_star.shape[1]}")
        y_star = None
        if self.y_star is not None:
            y_star = np.asarray(self.y_star, dtype=float).ravel()
            if y_star.shape[0] != n_star:
                raise ValueError("y_star length does not match X_star")
        s = np.linalg.svd(X, compute_uv=False)
        if s[-1] <= RANK_TOL * s[0] or X.shape[1] > n:
            raise ValueError("singular design: X does not have full column rank")
        if self.x_names is not None and len(self.x_names) != X.shape[1]:
            raise ValueError("x_names length does not match X")
        for name, value in (("y", y), ("X", X), ("X_star", X_star), ("Z", Z), ("Z_star", Z_star), ("y_star", y_star)):
            object.__setattr__(self, name, None if value is None else _readonly(value))
        if self.x_names is not None:
            object.__setattr__(self, "x_names", tuple(self.x_names))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_star(self) -> int:
        return self.X_star.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def q(self) -> int:
        return self.Z.shape[1]

    def select(self, columns) -> "DesignData":
        """Restrict the fixed effects to ``columns`` (indices or names)."""
        idx = []
        for c in columns:
            if isinstance(c, str):
                if self.x_names is None:
                    raise KeyError("design has no column names")
                idx.append(self.x_names.index(c))
            else:
                idx.append(int(c))
        names = None if self.x_names is None else tuple(self.x_names[i] for i in idx)
        return replace(self, X=self.X[:, idx], X_star=self.X_star[:, idx], x_names=names)


# -- covariance declarations -------------------------------------------------


@dataclass(frozen=True)
class SquaredExponential:
    """``sigma_f2 * exp(-0.5 * sum_k (a_k - b_k)^2 / l_k^2)`` with per-dimension scales."""

    sigma_f2: float
    length_scales: tuple

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.length_scales))
        if not self.sigma_f2 > 0:
            raise ValueError("sigma_f2 must be positive")
        if not ls or min(ls) <= 0:
            raise ValueError("length scales must be positive")
        object.__setattr__(self, "sigma_f2", float(self.sigma_f2))
        object.__setattr__(self, "length_scales", ls)


KernelSpec = SquaredExponential


def kernel_matrix(kernel: KernelSpec, A, B) -> np.ndarray:
    A = _as_matrix(A, "A")
    B = _as_matrix(B, "B")
    ls = np.asarray(kernel.length_scales, dtype=float)
    if np.any(ls <= 0):
        raise ValueError("length scales must be positive")
    if A.shape[1] != ls.size or B.shape[1] != ls.size:
        raise ValueError(f"inputs need {ls.size} columns, got {A.shape[1]} and {B.shape[1]}")
    if A.shape[0] == 0 or B.shape[0] == 0:
        return np.zeros((A.shape[0], B.shape[0]))
    d2 = cdist(A / ls, B / ls, metric="sqeuclidean")
    return kernel.sigma_f2 * np.exp(-0.5 * d2)


def _clean_psd(G, name: str) -> np.ndarray:
    G = np.asarray(G, dtype=float)
    if G.ndim == 0:
        G = G.reshape(1, 1)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ValueError(f"{name} must be square")
    if G.size == 0:
        return G
    scale = max(1.0, float(np.abs(G).max()))
    if np.abs(G - G.T).max() > 1e-10 * scale:
        raise ValueError(f"{name} is not symmetric")
    G = symmetrize(G)
    w, U = np.linalg.eigh(G)
    if w.min() < -EIG_CLAMP_TOL:
        raise ValueError(f"{name} is not positive semidefinite (min eigenvalue {w.min():.3g})")
    if w.min() < 0:
        G = symmetrize((U * np.clip(w, 0.0, None)) @ U.T)
    return G


def _positive(x, name: str) -> float:
    x = float(x)
    if not x > 0:
        raise ValueError(f"{name} must be positive")
    return x


@dataclass(frozen=True)
class Lmm:
    """``V = Z G Z' + sigma2 I``."""

    G: np.ndarray
    sigma2: float

    def __post_init__(self):
        object.__setattr__(self, "G", _readonly(_clean_psd(self.G, "G")))
        object.__setattr__(self, "sigma2", _positive(self.sigma2, "sigma2"))


@dataclass(frozen=True)
class WeightedLmm:
    """Mixed model whose row ``i`` averages ``w_i`` replicates: residual ``sigma2 / w_i``."""

    G: np.ndarray
    sigma2: float
    weights: np.ndarray
    weights_star: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "G", _readonly(_clean_psd(self.G, "G")))
        object.__setattr__(self, "sigma2", _positive(self.sigma2, "sigma2"))
        for name in ("weights", "weights_star"):
            w = np.asarray(getattr(self, name), dtype=float).ravel()
            if w.size == 0 or not np.all(w > 0):
                raise ValueError(f"{name} must be strictly positive")
            object.__setattr__(self, name, _readonly(w))


@dataclass(frozen=True)
class Gpr:
    """``V = K(Z, Z) + sigma2 I`` with ``Z`` holding the input coordinates."""

    kernel: KernelSpec
    sigma2: float

    def __post_init__(self):
        object.__setattr__(self, "sigma2", _positive(self.sigma2, "sigma2"))


@dataclass(frozen=True)
class Gls:
    """Explicit covariances.

    ``C`` defaults to zero, the classical GLS regime. ``R``/``R_star``
    default to ``V``/``V_star``: with no shared random component the whole
    covariance is residual.
    """

    V: np.ndarray
    V_star: np.ndarray
    C: Optional[np.ndarray] = None
    R: Optional[np.ndarray] = None
    R_star: Optional[np.ndarray] = None

    def __post_init__(self):
        V = _clean_psd(self.V, "V")
        V_star = _clean_psd(self.V_star, "V_star")
        C = np.zeros((V_star.shape[0], V.shape[0])) if self.C is None else _as_matrix(self.C, "C", V_star.shape[0])
        if C.shape[1] != V.shape[0]:
            raise ValueError("C must be n_star x n")
        object.__setattr__(self, "V", _readonly(V))
        object.__setattr__(self, "V_star", _readonly(V_star))
        object.__setattr__(self, "C", _readonly(C))
        if self.R is not None:
            object.__setattr__(self, "R", _readonly(_clean_psd(self.R, "R")))
        if self.R_star is not None:
            object.__setattr__(self, "R_star", _readonly(_clean_psd(self.R_star, "R_star")))


CovarianceSpec = Union[Lmm, WeightedLmm, Gpr, Gls]


class ResidualMode(str, Enum):
    """How ``R`` and ``R_star`` are read.

    ``RESIDUAL``: the residual blocks (``sigma2 I``, ``diag(sigma2/w)``),
    so that ``Cov(y_new, y) = V - R``. ``GAUSSIAN_CONDITIONAL``: the literal
    conditional variances ``V* - C V^-1 C'`` and ``V - K V^-1 K'`` with ``K``
    the shared (non-residual) covariance.
    """

    RESIDUAL = "residual"
    GAUSSIAN_CONDITIONAL = "gaussian_conditional"


@dataclass(frozen=True)
class CovarianceBundle:
    V: np.ndarray
    V_star: np.ndarray
    C: np.ndarray
    R: np.ndarray
    R_star: np.ndarray
    cov_new: np.ndarray  # Cov(y_new, y): the shared part of V used by the training hat matrix
    residual: np.ndarray  # V - cov_new, including any jitter added to V
    chol_V: CholeskyFactor
    chol_R: CholeskyFactor
    chol_R_star: CholeskyFactor
    mode: ResidualMode = ResidualMode.RESIDUAL
    jitter_by_matrix: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.V.shape[0]

    @property
    def n_star(self) -> int:
        return self.V_star.shape[0]

    @property
    def jitter(self) -> float:
        return max(self.jitter_by_matrix.values(), default=0.0)


def _is_diagonal(A: np.ndarray) -> bool:
    return np.count_nonzero(A - np.diag(np.diag(A))) == 0


def _factor(A: np.ndarray, name: str) -> tuple[np.ndarray, CholeskyFactor]:
    if _is_diagonal(A):
        d = np.diag(A)
        if np.all(d > 0):
            return A, CholeskyFactor(np.diag(np.sqrt(d)), diagonal=True)
    return cholesky(symmetrize(A), name)


def _shared_blocks(spec: CovarianceSpec, data: DesignData):
    """Return ``(K, K_star, C, res, res_star)`` with ``V = K + res``."""
    n, n_star = data.n, data.n_star
    if isinstance(spec, (Lmm, WeightedLmm)):
        G = spec.G
        if G.shape[0] != data.q:
            raise ValueError(f"G is {G.shape[0]}x{G.shape[0]} but Z has {data.q} columns")
        if isinstance(spec, WeightedLmm):
            w, w_star = spec.weights, spec.weights_star
            if w.size != n or w_star.size != n_star:
                raise ValueError("weights do not match the number of rows")
        else:
            w, w_star = np.ones(n), np.ones(n_star)
        Z, Z_star = data.Z, data.Z_star
        K = Z @ G @ Z.T
        K_star = Z_star @ G @ Z_star.T
        C = Z_star @ G @ Z.T
        return K, K_star, C, np.diag(spec.sigma2 / w), np.diag(spec.sigma2 / w_star)
    if isinstance(spec, Gpr):
        if data.q != len(spec.kernel.length_scales):
            raise ValueError(f"kernel has {len(spec.kernel.length_scales)} length scales but Z has {data.q} columns")
        K = kernel_matrix(spec.kernel, data.Z, data.Z)
        K_star = kernel_matrix(spec.kernel, data.Z_star, data.Z_star)
        C = kernel_matrix(spec.kernel, data.Z_star, data.Z)
        return K, K_star, C, spec.sigma2 * np.eye(n), spec.sigma2 * np.eye(n_star)
    if isinstance(spec, Gls):
        if spec.V.shape[0] != n or spec.V_star.shape[0] != n_star:
            raise ValueError("explicit covariances do not match the design sizes")
        R = spec.V if spec.R is None else spec.R
        R_star = spec.V_star if spec.R_star is None else spec.R_star
        if R.shape[0] != n or R_star.shape[0] != n_star:
            raise ValueError("explicit residual covariances do not match the design sizes")
        return spec.V - R, spec.V_star - R_star, np.array(spec.C), R, R_star
    raise TypeError(f"unknown covariance spec {type(spec).__name__}")


def realize(
    spec: CovarianceSpec,
    data: DesignData,
    r_mode: ResidualMode = ResidualMode.RESIDUAL,
    check: bool = True,
) -> CovarianceBundle:
    """Build the covariance matrices of ``spec`` on the rows of ``data``.

    Parameters
    ----------
    spec : CovarianceSpec
        Covariance declaration.
    data : DesignData
        Supplies ``Z``/``Z_star`` and the sizes.
    r_mode : ResidualMode
        Reading of ``R``/``R_star``; see :class:`ResidualMode`.
    check : bool
        Verify that the joint covariance of ``(y, y*)`` is PSD (and, for
        explicit GLS residuals, that ``V - R`` is PSD).

    Raises
    ------
    ValueError
        On dimension mismatch, or :class:`NotPositiveDefiniteError` when a
        covariance cannot be factored even after jitter.
    """
    r_mode = ResidualMode(r_mode)
    K, K_star, C, res, res_star = _shared_blocks(spec, data)
    if isinstance(spec, Gls):
        V, V_star = np.array(spec.V), np.array(spec.V_star)
        if check and spec.R is not None:
            gap = np.linalg.eigvalsh(symmetrize(K)).min()
            if gap < -PSD_TOL:
                raise ValueError(f"V - R is not positive semidefinite (min eigenvalue {gap:.3g})")
    else:
        V, V_star = K + res, K_star + res_star
    V = symmetrize(V)
    V_star = symmetrize(V_star)
    jitter = {}
    V, chol_V = cholesky(V, "V")
    jitter["V"] = chol_V.jitter

    schur = None
    if check or r_mode is ResidualMode.GAUSSIAN_CONDITIONAL:
        W = chol_V.half_solve(C.T)
        schur = symmetrize(V_star - W.T @ W)
        if check:
            try:
                np.linalg.cholesky(schur + PSD_TOL * np.eye(schur.shape[0]))
            except np.linalg.LinAlgError:
                raise ValueError("joint covariance of (y, y*) is not positive semidefinite") from None

    if r_mode is ResidualMode.RESIDUAL:
        R, R_star = res, res_star
    else:
        R_star = schur
        Wk = chol_V.half_solve(K.T)
        R = symmetrize(V - Wk.T @ Wk)
    R, chol_R = _factor(R, "R")
    R_star, chol_R_star = _factor(R_star, "R_star")
    jitter["R"] = chol_R.jitter
    jitter["R_star"] = chol_R_star.jitter
    return CovarianceBundle(
        V=_readonly(V),
        V_star=_readonly(V_star),
        C=_readonly(C),
        R=_readonly(R),
        R_star=_readonly(R_star),
        cov_new=_readonly(K),
        residual=_readonly(res + chol_V.jitter * np.eye(res.shape[0]) if chol_V.jitter else res),
        chol_V=chol_V,
        chol_R=chol_R,
        chol_R_star=chol_R_star,
        mode=r_mode,
        jitter_by_matrix=jitter,
    )
