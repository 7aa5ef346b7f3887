"""Prediction-error estimators and model selection.

All estimators are per-observation averages. ``tai``, ``cai`` and ``mai``
share the training term ``-l(y)/n`` and differ only in their penalty:

* ``tai``: the transductive penalty :func:`c_tai`, unbiased for the
  conditional risk at the prediction rows;
* ``cai``: ``tr(H)/n``;
* ``mai``: ``p/n``.

``loss_opt_t`` is the squared-error analogue, training MSE plus the
transductive optimism :func:`w_t`.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ._linalg import CholeskyFactor, cholesky, trace_of_product
from .model import CovarianceBundle, CovarianceSpec, DesignData, ResidualMode, realize
from .predict import GlsEstimate, HatPair, gls_fit, hat_matrices

__all__ = [
    "BiasedPredictorError",
    "CRITERIA",
    "CriterionReport",
    "ModelCandidate",
    "SelectionOptions",
    "SelectionResult",
    "c_tai",
    "c_tai_biased",
    "c_tai_gls",
    "cai",
    "criterion_report",
    "evaluate_model_set",
    "gaussian_neg_loglik",
    "holdout_neg_loglik",
    "loss_opt_t",
    "mahalanobis_correction",
    "mai",
    "oracle_conditional_risk",
    "select",
    "tai",
    "w_t",
]

LOG_2PI = math.log(2.0 * math.pi)
BIAS_TOL = 1e-6

# selection rule name -> CriterionReport field it minimizes
CRITERIA = {"tAIC": "tai", "cAIC": "cai", "mAIC": "mai", "OptT": "loss_opt_t"}


class BiasedPredictorError(ValueError):
    pass


def gaussian_neg_loglik(resid, R) -> float:
    """``-(1/m) log N(resid; 0, R)``.

    ``R`` may be a matrix or a :class:`CholeskyFactor`.
    """
    resid = np.asarray(resid, dtype=float).ravel()
    factor = R if isinstance(R, CholeskyFactor) else cholesky(np.asarray(R, dtype=float), "R")[1]
    m = resid.shape[0]
    if factor.size != m:
        raise ValueError("residual length does not match R")
    return 0.5 * (factor.logdet() + m * LOG_2PI + factor.quad(resid)) / m


def _require_unbiased(hats: HatPair, what: str):
    if not hats.is_unbiased(BIAS_TOL):
        hx, hsx = hats.bias_residuals()
        raise BiasedPredictorError(
            f"biased predictor: |HX - X| = {hx:.3g}, |H*X - X*| = {hsx:.3g}; {what}"
        )


@dataclass(frozen=True)
class _WeightedTraces:
    """Per-observation traces shared by the likelihood penalties."""

    hv: float  # tr(R^-1 H V)/n
    hc: float  # tr(R*^-1 H* C')/n*
    v: float  # tr(R^-1 V)/n
    v_star: float  # tr(R*^-1 V*)/n*
    hvh: float  # tr(R^-1 H V H')/n
    hvh_star: float  # tr(R*^-1 H* V H*')/n*
    log_ratio: float  # log(|R*|^(1/n*) / |R|^(1/n))


def _weighted_traces(bundle: CovarianceBundle, hats: HatPair) -> _WeightedTraces:
    n, n_star = bundle.n, bundle.n_star
    H, H_star, V = hats.H, hats.H_star, bundle.V
    if H.shape != (n, n) or H_star.shape != (n_star, n):
        raise ValueError("hat matrices do not match the bundle sizes")
    RiH = bundle.chol_R.solve(H)
    RiH_V = RiH @ V
    RsiHs = bundle.chol_R_star.solve(H_star)
    return _WeightedTraces(
        hv=trace_of_product(RiH, V) / n,
        hc=float(np.sum(RsiHs * bundle.C)) / n_star,
        v=bundle.chol_R.trace_solve(V) / n,
        v_star=bundle.chol_R_star.trace_solve(bundle.V_star) / n_star,
        hvh=float(np.sum(RiH_V * H)) / n,
        hvh_star=float(np.sum((RsiHs @ V) * H_star)) / n_star,
        log_ratio=bundle.chol_R_star.logdet() / n_star - bundle.chol_R.logdet() / n,
    )


def _c_tai_from(t: _WeightedTraces) -> float:
    return (
        t.hv
        - t.hc
        + 0.5 * (t.log_ratio + t.v_star - t.v)
        + 0.5 * (t.hvh_star - t.hvh)
    )


def c_tai(bundle: CovarianceBundle, hats: HatPair) -> float:
    """Transductive penalty for unbiased linear predictors.

    Expected gap between the per-observation transductive negative
    log-likelihood and the training one::

        tr(R^-1 H V)/n - tr(R*^-1 H* C')/n*
          + 1/2 [log(|R*|^(1/n*) / |R|^(1/n)) + tr(R*^-1 V*)/n* - tr(R^-1 V)/n]
          + 1/2 [tr(R*^-1 H* V H*')/n* - tr(R^-1 H V H')/n]

    Raises :class:`BiasedPredictorError` unless ``H X = X`` and
    ``H* X = X*``; use :func:`c_tai_biased` for biased predictors.
    """
    _require_unbiased(hats, "use c_tai_biased with the true means")
    return _c_tai_from(_weighted_traces(bundle, hats))


def c_tai_biased(bundle: CovarianceBundle, hats: HatPair, mu, mu_star) -> float:
    """:func:`c_tai` plus the bias terms that vanish when ``H mu = mu``, ``H* mu = mu*``."""
    mu = np.asarray(mu, dtype=float).ravel()
    mu_star = np.asarray(mu_star, dtype=float).ravel()
    n, n_star = bundle.n, bundle.n_star
    base = _c_tai_from(_weighted_traces(bundle, hats))
    Hmu = hats.H @ mu
    Hs_mu = hats.H_star @ mu
    Ri = bundle.chol_R.solve
    Rsi = bundle.chol_R_star.solve
    train = (2.0 * mu @ Ri(Hmu) - mu @ Ri(mu) - Hmu @ Ri(Hmu)) / (2.0 * n)
    test = (2.0 * mu_star @ Rsi(Hs_mu) - mu_star @ Rsi(mu_star) - Hs_mu @ Rsi(Hs_mu)) / (2.0 * n_star)
    return base + train - test


def c_tai_gls(data: DesignData, bundle: CovarianceBundle, est: Optional[GlsEstimate] = None) -> float:
    """Closed form of the penalty when ``Cov(y*, y) = 0``.

    ``p/n + 1/2 log(|V*|^(1/n*)/|V|^(1/n)) + 1/2 tr[Var(b) (I*/n* - I/n)]``
    with ``I = X'V^-1X`` and ``I* = X*'V*^-1X*`` the Fisher informations of
    the coefficient estimators on the training and prediction rows.
    """
    if np.abs(bundle.C).max(initial=0.0) > 1e-12:
        raise ValueError("cross-covariance nonzero: the GLS closed form needs Cov(y*, y) = 0")
    if est is None:
        est = gls_fit(data, bundle)
    n, n_star, p = data.n, data.n_star, data.p
    _, chol_Vs = cholesky(np.asarray(bundle.V_star), "V_star")
    info = data.X.T @ bundle.chol_V.solve(data.X)
    info_star = data.X_star.T @ chol_Vs.solve(data.X_star)
    log_ratio = chol_Vs.logdet() / n_star - bundle.chol_V.logdet() / n
    return p / n + 0.5 * log_ratio + 0.5 * trace_of_product(est.var_beta_hat, info_star / n_star - info / n)


def mahalanobis_correction(bundle: CovarianceBundle, hats: HatPair) -> float:
    """Optimism of the Mahalanobis (``R``/``R*``-weighted) squared error.

    Equals ``2 c_tai - log(|R*|^(1/n*) / |R|^(1/n))``.
    """
    _require_unbiased(hats, "the Mahalanobis optimism needs unbiased hats")
    t = _weighted_traces(bundle, hats)
    return 2.0 * t.hv - 2.0 * t.hc + t.v_star - t.v + t.hvh_star - t.hvh


def w_t(bundle: CovarianceBundle, hats: HatPair, mu=None, mu_star=None) -> float:
    """Transductive optimism of the squared-error loss.

    Without means the predictor must be unbiased; with means the general
    form (including the mean terms) is returned.
    """
    if (mu is None) != (mu_star is None):
        raise ValueError("supply both mu and mu_star or neither")
    if mu is None and not hats.is_unbiased(BIAS_TOL):
        hx, hsx = hats.bias_residuals()
        raise BiasedPredictorError(
            f"biased predictor without means: |HX - X| = {hx:.3g}, |H*X - X*| = {hsx:.3g}"
        )
    n, n_star = bundle.n, bundle.n_star
    H, H_star, V = hats.H, hats.H_star, bundle.V
    value = (
        2.0 * trace_of_product(H, V) / n
        - 2.0 * float(np.sum(H_star * bundle.C)) / n_star
        + float(np.trace(bundle.V_star)) / n_star
        - float(np.trace(V)) / n
        + float(np.sum((H_star @ V) * H_star)) / n_star
        - float(np.sum((H @ V) * H)) / n
    )
    if mu is not None:
        mu = np.asarray(mu, dtype=float).ravel()
        mu_star = np.asarray(mu_star, dtype=float).ravel()
        Hmu, Hs_mu = H @ mu, H_star @ mu
        value += (2.0 * mu @ Hmu - mu @ mu - Hmu @ Hmu) / n
        value -= (2.0 * mu_star @ Hs_mu - mu_star @ mu_star - Hs_mu @ Hs_mu) / n_star
    return value


def _hats(data, bundle, hats):
    return hat_matrices(data, bundle) if hats is None else hats


def _train_nll(data: DesignData, bundle: CovarianceBundle, hats: HatPair) -> float:
    return gaussian_neg_loglik(data.y - hats.f_hat, bundle.chol_R)


def tai(data: DesignData, bundle: CovarianceBundle, hats: Optional[HatPair] = None) -> float:
    hats = _hats(data, bundle, hats)
    return _train_nll(data, bundle, hats) + c_tai(bundle, hats)


def cai(data: DesignData, bundle: CovarianceBundle, hats: Optional[HatPair] = None) -> float:
    hats = _hats(data, bundle, hats)
    return _train_nll(data, bundle, hats) + float(np.trace(hats.H)) / data.n


def mai(data: DesignData, bundle: CovarianceBundle, hats: Optional[HatPair] = None) -> float:
    hats = _hats(data, bundle, hats)
    return _train_nll(data, bundle, hats) + data.p / data.n


def loss_opt_t(data: DesignData, bundle: CovarianceBundle, hats: Optional[HatPair] = None, mu=None, mu_star=None) -> float:
    hats = _hats(data, bundle, hats)
    r = data.y - hats.f_hat
    return float(r @ r) / data.n + w_t(bundle, hats, mu, mu_star)


def oracle_conditional_risk(bundle: CovarianceBundle, hats: HatPair, y, mu, mu_star) -> float:
    """``-(1/n*) E[l(y*) | y]`` under the true Gaussian model in ``bundle``.

    ``l`` is the transductive log-likelihood with covariance ``R*`` centred
    at the prediction ``H* y``. With ``S = V* - C V^-1 C'`` and
    ``d = mu* + C V^-1 (y - mu) - H* y``::

        1/(2 n*) [log|R*| + n* log(2 pi) + tr(R*^-1 S) + d' R*^-1 d]
    """
    y = np.asarray(y, dtype=float).ravel()
    mu = np.asarray(mu, dtype=float).ravel()
    mu_star = np.asarray(mu_star, dtype=float).ravel()
    n, n_star = bundle.n, bundle.n_star
    if y.size != n or mu.size != n or mu_star.size != n_star or hats.H_star.shape != (n_star, n):
        raise ValueError("dimension mismatch between bundle, hats and means")
    W = bundle.chol_V.half_solve(bundle.C.T)
    cond_var = bundle.V_star - W.T @ W
    delta = mu_star + bundle.C @ bundle.chol_V.solve(y - mu) - hats.H_star @ y
    Rs = bundle.chol_R_star
    return 0.5 * (Rs.logdet() + n_star * LOG_2PI + Rs.trace_solve(cond_var) + Rs.quad(delta)) / n_star


def holdout_neg_loglik(bundle: CovarianceBundle, hats: HatPair, y_star) -> float:
    """Realized ``-(1/n*) l(y*)`` for observed held-out responses."""
    return gaussian_neg_loglik(np.asarray(y_star, dtype=float) - hats.f_star_hat, bundle.chol_R_star)


# -- reports and selection ---------------------------------------------------


@dataclass(frozen=True)
class CriterionReport:
    neg_loglik_train: float
    c_tai: float
    tai: float
    cai: float
    mai: float
    w_t: float
    loss_opt_t: float
    mahalanobis_correction: float
    trace_h: float
    n: int
    n_star: int
    p: int
    jitter_applied: float = 0.0
    oracle_conditional_risk: Optional[float] = None
    holdout_neg_loglik: Optional[float] = None

    def as_dict(self) -> dict:
        return asdict(self)

    def scaled(self, factor: float) -> "CriterionReport":
        """Multiply every error-scale quantity by ``factor`` (e.g. ``2n``)."""
        keys = (
            "neg_loglik_train", "c_tai", "tai", "cai", "mai", "w_t", "loss_opt_t",
            "mahalanobis_correction", "oracle_conditional_risk", "holdout_neg_loglik",
        )
        changes = {k: None if getattr(self, k) is None else factor * getattr(self, k) for k in keys}
        return replace(self, **changes)


def criterion_report(
    data: DesignData,
    bundle: CovarianceBundle,
    hats: Optional[HatPair] = None,
    *,
    mu=None,
    mu_star=None,
) -> CriterionReport:
    """Every estimator for one model; the oracle risk is filled when true means are given."""
    hats = _hats(data, bundle, hats)
    train = _train_nll(data, bundle, hats)
    t = _weighted_traces(bundle, hats)
    _require_unbiased(hats, "criterion reports need unbiased hats")
    penalty = _c_tai_from(t)
    trace_h = float(np.trace(hats.H))
    wt = w_t(bundle, hats)
    r = data.y - hats.f_hat
    oracle = None
    if mu is not None:
        oracle = oracle_conditional_risk(bundle, hats, data.y, mu, mu_star)
    holdout = None
    if data.y_star is not None:
        holdout = holdout_neg_loglik(bundle, hats, data.y_star)
    return CriterionReport(
        neg_loglik_train=train,
        c_tai=penalty,
        tai=train + penalty,
        cai=train + trace_h / data.n,
        mai=train + data.p / data.n,
        w_t=wt,
        loss_opt_t=float(r @ r) / data.n + wt,
        mahalanobis_correction=2.0 * t.hv - 2.0 * t.hc + t.v_star - t.v + t.hvh_star - t.hvh,
        trace_h=trace_h,
        n=data.n,
        n_star=data.n_star,
        p=data.p,
        jitter_applied=bundle.jitter,
        oracle_conditional_risk=oracle,
        holdout_neg_loglik=holdout,
    )


@dataclass(frozen=True)
class ModelCandidate:
    name: str
    data: DesignData
    spec: CovarianceSpec


@dataclass(frozen=True)
class SelectionOptions:
    r_mode: ResidualMode = ResidualMode.RESIDUAL
    criteria: tuple = tuple(CRITERIA)
    n_jobs: int = 1


@dataclass
class SelectionResult:
    names: list
    per_model: list  # CriterionReport, aligned with names
    chosen: dict  # criterion -> model name
    ties: dict = field(default_factory=dict)  # criterion -> tied model names, only when >1

    def report(self, name: str) -> CriterionReport:
        return self.per_model[self.names.index(name)]

    def as_dict(self) -> dict:
        return {
            "models": [{"name": nm, **rep.as_dict()} for nm, rep in zip(self.names, self.per_model)],
            "chosen": dict(self.chosen),
            "ties": {k: list(v) for k, v in self.ties.items()},
        }


def select(names: Sequence[str], reports: Sequence[CriterionReport], criteria=tuple(CRITERIA)) -> SelectionResult:
    """Argmin per criterion; ties go to the lowest index and are recorded."""
    if not reports:
        raise ValueError("empty model set")
    chosen, ties = {}, {}
    for crit in criteria:
        if crit not in CRITERIA:
            raise ValueError(f"unknown criterion {crit!r}; known: {sorted(CRITERIA)}")
        values = np.array([getattr(r, CRITERIA[crit]) for r in reports])
        best = int(np.argmin(values))
        chosen[crit] = names[best]
        tied = np.flatnonzero(values == values[best])
        if tied.size > 1:
            ties[crit] = [names[i] for i in tied]
    return SelectionResult(list(names), list(reports), chosen, ties)


def evaluate_model_set(
    models: Sequence[ModelCandidate],
    shared_y=None,
    options: SelectionOptions = SelectionOptions(),
) -> SelectionResult:
    """Evaluate every candidate and pick the minimizer of each criterion.

    Candidates may differ in fixed effects and covariance but must share the
    training response (``shared_y`` overrides each candidate's ``y``) and
    the prediction rows.
    """
    if not models:
        raise ValueError("empty model set")
    names = [m.name for m in models]
    if len(set(names)) != len(names):
        raise ValueError("model names must be unique")
    n_star = models[0].data.n_star
    if any(m.data.n_star != n_star for m in models):
        raise ValueError("all models must share the prediction rows")

    def run(m: ModelCandidate) -> CriterionReport:
        data = m.data if shared_y is None else replace(m.data, y=shared_y)
        bundle = realize(m.spec, data, options.r_mode)
        return criterion_report(data, bundle)

    if options.n_jobs > 1 and len(models) > 1:
        with ThreadPoolExecutor(options.n_jobs) as pool:
            reports = list(pool.map(run, models))
    else:
        reports = [run(m) for m in models]
    return select(names, reports, options.criteria)
