"""Transductive prediction-error estimators for Gaussian linear models.

Computes the transductive information criterion (tAI), the transductive
optimism loss, and the classical conditional/marginal AIC-style baselines
(cAI, mAI) for mixed models, Gaussian process regression and GLS, and
selects models by minimizing them.
"""

__version__ = "0.1.0"

from .model import (  # noqa: E402
    CovarianceBundle,
    DesignData,
    Gls,
    Gpr,
    Lmm,
    ResidualMode,
    SquaredExponential,
    WeightedLmm,
    kernel_matrix,
    realize,
)
from .predict import GlsEstimate, HatPair, gls_fit, hat_matrices  # noqa: E402
from .criteria import (  # noqa: E402
    CriterionReport,
    ModelCandidate,
    SelectionOptions,
    SelectionResult,
    c_tai,
    c_tai_biased,
    c_tai_gls,
    cai,
    criterion_report,
    evaluate_model_set,
    gaussian_neg_loglik,
    loss_opt_t,
    mahalanobis_correction,
    mai,
    oracle_conditional_risk,
    tai,
    w_t,
)
