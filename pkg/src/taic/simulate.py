"""Longitudinal extrapolation study and Monte Carlo oracles.

The data-generating process has ``S`` subjects measured at times 1..10
(training) and 15, 20 (prediction)::

    phi_ij = 0.5 t_ij + x_ij0 + x_ij1 + x_ij2 + 2 (x_ij3 + ... + x_ij6)
             + b_i1 + t_ij b_i2 + eps_ij

with ``x_0 = 1``, ``x_1 ~ Bernoulli(0.5)``, ``x_2..x_6 ~ N(0, 1)``,
``b_i1 ~ N(0, 15)``, ``b_i2 ~ N(0, 1)`` and ``eps ~ N(0, sigma2)``. Three
nested fixed-effect models are fitted with the true covariance.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ._linalg import cholesky
from .criteria import CRITERIA, criterion_report, oracle_conditional_risk
from .model import CovarianceBundle, DesignData, Lmm, ResidualMode, realize
from .predict import HatPair, hat_matrices

log = logging.getLogger(__name__)

__all__ = [
    "SimulationConfig",
    "Replication",
    "ExperimentSummary",
    "MonteCarloEstimate",
    "OracleEstimates",
    "MODEL_COLUMNS",
    "generate_replication",
    "candidate_models",
    "run_experiment",
    "sampling_oracle",
    "growth_like_rows",
]

X_NAMES = ("x0", "x1", "x2", "x3", "x4", "x5", "x6", "time")
MODEL_COLUMNS = {
    "model1": ("x0", "x1", "x2", "time"),
    "model2": ("x0", "x1", "x2", "x3", "x4", "time"),
    "model3": X_NAMES,
}
_STREAMS = {"covariates": 0, "effects": 1, "noise": 2}


@dataclass(frozen=True)
class SimulationConfig:
    subjects: int
    sigma2: float
    replications: int = 200
    seed: int = 0
    var_b1: float = 15.0
    var_b2: float = 1.0
    train_times: tuple = tuple(range(1, 11))
    pred_times: tuple = (15, 20)
    beta_time: float = 0.5
    beta_x: tuple = (1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0)
    redraw_covariates: bool = True
    bernoulli_per_subject: bool = False
    r_mode: ResidualMode = ResidualMode.RESIDUAL

    def __post_init__(self):
        if self.subjects < 1:
            raise ValueError("subjects must be >= 1")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if set(self.train_times) & set(self.pred_times):
            raise ValueError("training and prediction times must be disjoint")
        if len(self.beta_x) != 7:
            raise ValueError("beta_x needs 7 coefficients (x0..x6)")

    @property
    def beta(self) -> np.ndarray:
        return np.array([*self.beta_x, self.beta_time], dtype=float)

    @property
    def label(self) -> str:
        return f"S{self.subjects}_sigma{self.sigma2:g}"


def _rng(seed: int, rep: int, stream: str) -> np.random.Generator:
    ss = np.random.SeedSequence(seed, spawn_key=(rep, _STREAMS[stream]))
    return np.random.default_rng(ss)


@dataclass(frozen=True)
class Replication:
    data: DesignData  # full design: columns X_NAMES
    spec: Lmm
    beta: np.ndarray
    mu: np.ndarray
    mu_star: np.ndarray

    def __iter__(self):
        return iter((self.data, self.spec, self.beta))


def _per_subject_z(times: np.ndarray, subjects: int) -> np.ndarray:
    k = times.size
    Z = np.zeros((subjects * k, 2 * subjects))
    for i in range(subjects):
        rows = slice(i * k, (i + 1) * k)
        Z[rows, 2 * i] = 1.0
        Z[rows, 2 * i + 1] = times
    return Z


def generate_replication(cfg: SimulationConfig, rep_index: int) -> Replication:
    """Draw one data set; reproducible from ``(cfg.seed, rep_index)``."""
    S = cfg.subjects
    t_train = np.asarray(cfg.train_times, dtype=float)
    t_pred = np.asarray(cfg.pred_times, dtype=float)
    times = np.concatenate([t_train, t_pred])
    m = times.size

    cov_rep = rep_index if cfg.redraw_covariates else 0
    rng_x = _rng(cfg.seed, cov_rep, "covariates")
    x = np.empty((S, m, 7))
    x[:, :, 0] = 1.0
    if cfg.bernoulli_per_subject:
        x[:, :, 1] = rng_x.binomial(1, 0.5, size=(S, 1))
    else:
        x[:, :, 1] = rng_x.binomial(1, 0.5, size=(S, m))
    x[:, :, 2:] = rng_x.standard_normal((S, m, 5))

    rng_b = _rng(cfg.seed, rep_index, "effects")
    b = rng_b.standard_normal((S, 2)) * np.sqrt([cfg.var_b1, cfg.var_b2])
    eps = _rng(cfg.seed, rep_index, "noise").standard_normal((S, m)) * np.sqrt(cfg.sigma2)

    design = np.concatenate([x, np.broadcast_to(times, (S, m))[:, :, None]], axis=2)
    mean = design @ cfg.beta
    phi = mean + b[:, [0]] + times * b[:, [1]] + eps

    k = t_train.size
    X = design[:, :k, :].reshape(-1, 8)
    X_star = design[:, k:, :].reshape(-1, 8)
    data = DesignData(
        y=phi[:, :k].ravel(),
        X=X,
        X_star=X_star,
        Z=_per_subject_z(t_train, S),
        Z_star=_per_subject_z(t_pred, S),
        y_star=phi[:, k:].ravel(),
        x_names=X_NAMES,
    )
    G = np.kron(np.eye(S), np.diag([cfg.var_b1, cfg.var_b2]))
    return Replication(data, Lmm(G, cfg.sigma2), cfg.beta, mean[:, :k].ravel(), mean[:, k:].ravel())


def candidate_models(data: DesignData) -> list:
    """The three nested fixed-effect views, as ``(name, DesignData)`` pairs."""
    return [(name, data.select(cols)) for name, cols in MODEL_COLUMNS.items()]


# -- Monte Carlo oracle --------------------------------------------------------


@dataclass(frozen=True)
class MonteCarloEstimate:
    mean: float
    se: float
    draws: int

    def covers(self, value: float, k: float = 3.0) -> bool:
        return abs(value - self.mean) <= k * self.se


@dataclass(frozen=True)
class OracleEstimates:
    """Monte Carlo means of the quantities whose expectations define the penalties.

    ``c_tai`` and ``w_t`` are ``None`` when the training response was held
    fixed (only the conditional risk is defined then).
    """

    risk: MonteCarloEstimate
    c_tai: Optional[MonteCarloEstimate] = None
    w_t: Optional[MonteCarloEstimate] = None


class _Accumulator:
    def __init__(self):
        self.n = 0
        self.total = 0.0
        self.total_sq = 0.0

    def add(self, values: np.ndarray):
        # shift by the first chunk mean to keep the variance accumulation stable
        if self.n == 0:
            self.shift = float(values.mean())
        v = values - self.shift
        self.n += values.size
        self.total += float(v.sum())
        self.total_sq += float(v @ v)

    def estimate(self) -> MonteCarloEstimate:
        mean = self.total / self.n
        var = (self.total_sq - self.n * mean**2) / (self.n - 1)
        return MonteCarloEstimate(mean + self.shift, float(np.sqrt(max(var, 0.0) / self.n)), self.n)


def _nll_columns(resid: np.ndarray, factor) -> np.ndarray:
    z = factor.half_solve(resid)
    m = resid.shape[0]
    return 0.5 * (factor.logdet() + m * np.log(2 * np.pi) + np.sum(z * z, axis=0)) / m


def sampling_oracle(
    bundle: CovarianceBundle,
    hats: HatPair,
    mu,
    mu_star,
    draws: int = 100_000,
    seed: int = 0,
    y=None,
    chunk: int = 20_000,
) -> OracleEstimates:
    """Brute-force check of the analytic penalties by simulation.

    Draws ``(y, y*)`` jointly from ``N((mu, mu*), [[V, C'], [C, V*]])`` and
    averages, per draw:

    * ``-(1/n*) l(y*) + (1/n) l(y)``, whose mean is the likelihood penalty;
    * ``|y* - H* y|^2 / n* - |y - H y|^2 / n``, whose mean is the optimism;
    * ``-(1/n*) l(y*)``, the risk.

    When ``y`` is given only ``y*`` is drawn, from its conditional law, and
    only the risk is estimated.
    """
    if draws < 1000:
        raise ValueError("sampling_oracle needs at least 1000 draws")
    mu = np.asarray(mu, dtype=float).ravel()
    mu_star = np.asarray(mu_star, dtype=float).ravel()
    n, n_star = bundle.n, bundle.n_star
    rng = np.random.default_rng(seed)
    risk, pen, opt = _Accumulator(), _Accumulator(), _Accumulator()

    if y is None:
        joint = np.block([[bundle.V, bundle.C.T], [bundle.C, bundle.V_star]])
        _, fac = cholesky(joint, "joint covariance")
        mean = np.concatenate([mu, mu_star])[:, None]
    else:
        y = np.asarray(y, dtype=float).ravel()
        W = bundle.chol_V.half_solve(bundle.C.T)
        _, fac = cholesky(bundle.V_star - W.T @ W, "conditional covariance")
        mean = (mu_star + bundle.C @ bundle.chol_V.solve(y - mu))[:, None]
        pred = (hats.H_star @ y)[:, None]

    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        sample = mean + fac.L @ rng.standard_normal((fac.size, m))
        if y is None:
            ys, yst = sample[:n], sample[n:]
            r_train = ys - hats.H @ ys
            r_test = yst - hats.H_star @ ys
            test_nll = _nll_columns(r_test, bundle.chol_R_star)
            train_nll = _nll_columns(r_train, bundle.chol_R)
            pen.add(test_nll - train_nll)
            opt.add(np.sum(r_test**2, axis=0) / n_star - np.sum(r_train**2, axis=0) / n)
        else:
            test_nll = _nll_columns(sample - pred, bundle.chol_R_star)
        risk.add(test_nll)
        done += m

    if y is None:
        return OracleEstimates(risk.estimate(), pen.estimate(), opt.estimate())
    return OracleEstimates(risk.estimate())


# -- experiment ----------------------------------------------------------------


ESTIMATORS = ("tai", "cai", "mai", "loss_opt_t", "oracle")
# selection rules evaluated in the experiment; "oracle" is the per-replication conditional argmin
RULES = (*CRITERIA, "oracle")


@dataclass
class ExperimentSummary:
    config: SimulationConfig
    models: tuple
    per_replication: list  # dicts: replication, model, tai, cai, mai, loss_opt_t, oracle, c_tai, trace_h, p
    risk_of_selected: dict  # rule -> mean oracle risk of the chosen model
    agreement_rate: dict  # oracle variant ("conditional"/"expected") -> rule -> rate
    density_samples: dict  # model -> estimator -> np.ndarray over replications
    expected_oracle_choice: str
    chosen: dict  # rule -> list of chosen model per successful replication
    failures: list = field(default_factory=list)  # (replication, message)
    jitter_events: list = field(default_factory=list)  # (replication, amount)

    @property
    def replications(self) -> int:
        return len(self.per_replication) // len(self.models)

    def to_csv(self, path, scale: float = 1.0) -> None:
        """Long format: one row per replication x model x estimator."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["replication", "model", "estimator", "value"])
            for est in ESTIMATORS:
                for row in self.per_replication:
                    w.writerow([row["replication"], row["model"], est, format(scale * row[est], ".17g")])

    def summary_dict(self, scale: float = 1.0) -> dict:
        """JSON-ready summary; ``scale`` multiplies every error value (e.g. ``2n``)."""
        cfg = asdict(self.config)
        cfg["r_mode"] = self.config.r_mode.value
        return {
            "setup": self.config.label,
            "config": cfg,
            "replications": self.replications,
            "risk_of_selected": {k: scale * v for k, v in self.risk_of_selected.items()},
            "agreement_rate": self.agreement_rate,
            "expected_oracle_choice": self.expected_oracle_choice,
            "mean": {
                m: {e: scale * float(np.mean(v)) for e, v in ests.items()} for m, ests in self.density_samples.items()
            },
            "failures": [{"replication": r, "error": msg} for r, msg in self.failures],
            "jitter_events": [{"replication": r, "jitter": j} for r, j in self.jitter_events],
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _one_replication(cfg: SimulationConfig, rep: int) -> tuple[list, float]:
    sim = generate_replication(cfg, rep)
    bundle = realize(sim.spec, sim.data, cfg.r_mode)
    rows = []
    for name, view in candidate_models(sim.data):
        hats = hat_matrices(view, bundle)
        r = criterion_report(view, bundle, hats)
        rows.append(
            {
                "replication": rep,
                "model": name,
                "tai": r.tai,
                "cai": r.cai,
                "mai": r.mai,
                "loss_opt_t": r.loss_opt_t,
                "oracle": oracle_conditional_risk(bundle, hats, view.y, sim.mu, sim.mu_star),
                "c_tai": r.c_tai,
                "trace_h": r.trace_h,
                "p": r.p,
                "n": r.n,
            }
        )
    return rows, bundle.jitter


def run_experiment(cfg: SimulationConfig, n_jobs: int = 1) -> ExperimentSummary:
    """Run every replication of one setup and summarize the selection rules.

    A replication that fails (e.g. a covariance that cannot be factored) is
    logged, recorded in ``failures`` and excluded.
    """
    models = tuple(MODEL_COLUMNS)

    def attempt(rep):
        try:
            return rep, _one_replication(cfg, rep), None
        except ValueError as exc:
            return rep, None, str(exc)

    reps = range(cfg.replications)
    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            outcomes = list(pool.map(attempt, reps))
    else:
        outcomes = [attempt(r) for r in reps]

    rows, failures, jitter_events = [], [], []
    for rep, result, err in outcomes:
        if err is not None:
            msg = f"{cfg.label}: replication {rep} failed and is excluded: {err}"
            log.warning(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            failures.append((rep, err))
            continue
        rep_rows, jitter = result
        rows.extend(rep_rows)
        if jitter > 0:
            jitter_events.append((rep, jitter))
    if not rows:
        raise RuntimeError(f"{cfg.label}: every replication failed")

    k = len(models)
    table = {e: np.array([r[e] for r in rows]).reshape(-1, k) for e in ESTIMATORS}
    oracle = table["oracle"]
    reps_ok = oracle.shape[0]
    idx = np.arange(reps_ok)

    chosen_idx = {rule: np.argmin(table[CRITERIA[rule]], axis=1) for rule in CRITERIA}
    chosen_idx["oracle"] = np.argmin(oracle, axis=1)
    expected_best = int(np.argmin(oracle.mean(axis=0)))
    chosen_idx["oracle_expected"] = np.full(reps_ok, expected_best)

    risk_of_selected = {rule: float(oracle[idx, c].mean()) for rule, c in chosen_idx.items()}
    agreement = {
        "conditional": {rule: float(np.mean(c == chosen_idx["oracle"])) for rule, c in chosen_idx.items()},
        "expected": {rule: float(np.mean(c == expected_best)) for rule, c in chosen_idx.items()},
    }
    density = {m: {e: table[e][:, j].copy() for e in ESTIMATORS} for j, m in enumerate(models)}
    chosen = {rule: [models[i] for i in c] for rule, c in chosen_idx.items()}
    return ExperimentSummary(
        config=cfg,
        models=models,
        per_replication=rows,
        risk_of_selected=risk_of_selected,
        agreement_rate=agreement,
        density_samples=density,
        expected_oracle_choice=models[expected_best],
        chosen=chosen,
        failures=failures,
        jitter_events=jitter_events,
    )


# -- synthetic growth-curve data -------------------------------------------------


def growth_like_rows(
    seed: int,
    subjects: int = 27,
    ages=(8, 10, 12, 14),
    beta=(16.3, 0.78, 1.0, 0.3),
    G=((4.0, -0.2), (-0.2, 0.05)),
    sigma2: float = 1.7,
) -> list:
    """Rows ``(subject, age, gender, distance)`` from a random intercept/slope model.

    Mean ``b0 + b1 age + b2 male + b3 age*male``; roughly the scale of the
    classic orthodontic growth data.
    """
    rng = np.random.default_rng(seed)
    n_male = subjects * 16 // 27
    genders = ["M"] * n_male + ["F"] * (subjects - n_male)
    b = rng.multivariate_normal(np.zeros(2), np.asarray(G, float), size=subjects)
    rows = []
    for i in range(subjects):
        male = 1.0 if genders[i] == "M" else 0.0
        for age in ages:
            mean = beta[0] + beta[1] * age + beta[2] * male + beta[3] * age * male
            y = mean + b[i, 0] + b[i, 1] * age + rng.normal(0.0, np.sqrt(sigma2))
            rows.append((f"s{i + 1:02d}", float(age), genders[i], float(y)))
    return rows
