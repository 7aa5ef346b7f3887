import csv
import json
import math

import numpy as np
import pytest

import taic.simulate as simulate
from taic.model import DesignData, Gls, realize
from taic.predict import HatPair, hat_matrices
from taic.simulate import (
    MODEL_COLUMNS,
    SimulationConfig,
    candidate_models,
    generate_replication,
    growth_like_rows,
    run_experiment,
    sampling_oracle,
)


def test_sizes():
    sim = generate_replication(SimulationConfig(subjects=10, sigma2=15), 0)
    assert (sim.data.n, sim.data.n_star) == (100, 20)
    assert sim.data.q == 20
    data, spec, beta = sim
    np.testing.assert_array_equal(beta, [1, 1, 1, 2, 2, 2, 2, 0.5])
    np.testing.assert_array_equal(data.X_star[:2, -1], [15.0, 20.0])


def test_covariate_layout():
    sim = generate_replication(SimulationConfig(subjects=30, sigma2=15, seed=3), 0)
    X = np.vstack([sim.data.X, sim.data.X_star])
    np.testing.assert_array_equal(X[:, 0], 1.0)
    assert set(np.unique(X[:, 1])) <= {0.0, 1.0}
    assert abs(X[:, 2:7].mean()) < 0.1
    np.testing.assert_array_equal(sim.data.X[:10, -1], np.arange(1, 11))


def test_bernoulli_per_subject_flag():
    sim = generate_replication(SimulationConfig(subjects=5, sigma2=15, bernoulli_per_subject=True), 0)
    x1 = np.concatenate([sim.data.X[:, 1].reshape(5, 10), sim.data.X_star[:, 1].reshape(5, 2)], axis=1)
    assert np.all(x1 == x1[:, [0]])


def test_fixed_covariates_flag():
    cfg = SimulationConfig(subjects=3, sigma2=15, redraw_covariates=False)
    a, b = generate_replication(cfg, 0), generate_replication(cfg, 1)
    np.testing.assert_array_equal(a.data.X, b.data.X)
    assert not np.array_equal(a.data.y, b.data.y)


def test_zero_variance_limit_is_deterministic():
    cfg = SimulationConfig(subjects=4, sigma2=1e-12, var_b1=0.0, var_b2=0.0)
    sim = generate_replication(cfg, 0)
    np.testing.assert_allclose(sim.data.y, sim.data.X @ sim.beta, atol=1e-5)
    np.testing.assert_allclose(sim.data.y_star, sim.data.X_star @ sim.beta, atol=1e-5)


def test_marginal_variance_at_last_time():
    cfg = SimulationConfig(subjects=50, sigma2=15, seed=17)
    dev = []
    for rep in range(1000):
        sim = generate_replication(cfg, rep)
        dev.append((sim.data.y_star - sim.mu_star)[1::2])  # time 20
    dev = np.concatenate(dev)
    assert dev.size == 50_000
    expected = 15 + 20**2 * 1 + 15
    assert expected == 430
    assert abs(dev.var() / expected - 1) < 0.02


def test_replications_are_reproducible_and_distinct():
    cfg = SimulationConfig(subjects=3, sigma2=20, seed=42)
    a, b = generate_replication(cfg, 5), generate_replication(cfg, 5)
    np.testing.assert_array_equal(a.data.y, b.data.y)
    np.testing.assert_array_equal(a.data.X, b.data.X)
    assert not np.array_equal(a.data.y, generate_replication(cfg, 6).data.y)


def test_candidate_models_are_nested():
    sim = generate_replication(SimulationConfig(subjects=10, sigma2=15), 0)
    views = dict(candidate_models(sim.data))
    assert [v.p for v in views.values()] == [4, 6, 8]
    assert views["model1"].x_names == ("x0", "x1", "x2", "time")
    cols = [set(MODEL_COLUMNS[m]) for m in ("model1", "model2", "model3")]
    assert cols[0] < cols[1] < cols[2]
    assert all("time" in c for c in cols)


def test_penalty_ordering_on_every_replication():
    summary = run_experiment(SimulationConfig(subjects=10, sigma2=20, replications=20, seed=1))
    for row in summary.per_replication:
        assert row["c_tai"] > row["trace_h"] / row["n"] > row["p"] / row["n"]


def test_single_replication_summary():
    summary = run_experiment(SimulationConfig(subjects=10, sigma2=15, replications=1))
    for m in summary.models:
        assert all(len(v) == 1 for v in summary.density_samples[m].values())
    for rates in summary.agreement_rate.values():
        assert all(0.0 <= r <= 1.0 for r in rates.values())


def test_experiment_is_deterministic_and_thread_independent():
    cfg = SimulationConfig(subjects=10, sigma2=25, replications=6, seed=9)
    a, b = run_experiment(cfg), run_experiment(cfg, n_jobs=3)
    assert a.per_replication == b.per_replication
    assert a.risk_of_selected == b.risk_of_selected
    assert a.agreement_rate == b.agreement_rate


def test_failed_replication_is_reported(monkeypatch):
    real = simulate._one_replication

    def flaky(cfg, rep):
        if rep == 1:
            raise ValueError("covariance not positive definite: V")
        return real(cfg, rep)

    monkeypatch.setattr(simulate, "_one_replication", flaky)
    with pytest.warns(RuntimeWarning, match="replication 1 failed"):
        summary = run_experiment(SimulationConfig(subjects=10, sigma2=15, replications=3))
    assert summary.replications == 2
    assert summary.failures == [(1, "covariance not positive definite: V")]


def test_csv_and_json_outputs(tmp_path):
    summary = run_experiment(SimulationConfig(subjects=10, sigma2=15, replications=2))
    summary.to_csv(tmp_path / "r.csv")
    with open(tmp_path / "r.csv") as fh:
        rows = list(csv.DictReader(fh))
    per_estimator = {}
    for r in rows:
        per_estimator[r["estimator"]] = per_estimator.get(r["estimator"], 0) + 1
    assert set(per_estimator.values()) == {2 * 3}
    summary.to_json(tmp_path / "s.json")
    payload = json.loads((tmp_path / "s.json").read_text())
    assert set(payload["agreement_rate"]) == {"conditional", "expected"}
    scaled = summary.summary_dict(scale=200.0)
    assert scaled["risk_of_selected"]["tAIC"] == pytest.approx(200 * summary.risk_of_selected["tAIC"])


# -- sampling oracle ---------------------------------------------------------------------


def _degenerate():
    d = DesignData(y=[0.0], X=np.ones((1, 1)), X_star=np.ones((1, 1)))
    b = realize(Gls(np.eye(1), np.eye(1)), d)
    zero = HatPair.from_matrices(np.zeros((1, 1)), np.zeros((1, 1)), d.y, d.X, d.X_star)
    return b, zero


def test_oracle_degenerate_entropy():
    b, zero = _degenerate()
    est = sampling_oracle(b, zero, [0.0], [0.0], draws=200_000, seed=1)
    assert est.risk.covers(0.5 * (math.log(2 * math.pi) + 1))


def test_oracle_standard_error_scaling():
    sim = generate_replication(SimulationConfig(subjects=2, sigma2=15, seed=0), 0)
    b = realize(sim.spec, sim.data)
    hats = hat_matrices(sim.data, b)
    small = sampling_oracle(b, hats, sim.mu, sim.mu_star, draws=20_000, seed=1)
    large = sampling_oracle(b, hats, sim.mu, sim.mu_star, draws=40_000, seed=2)
    assert large.c_tai.se / small.c_tai.se == pytest.approx(1 / math.sqrt(2), rel=0.2)
    assert large.w_t.se / small.w_t.se == pytest.approx(1 / math.sqrt(2), rel=0.2)


def test_oracle_is_seeded():
    b, zero = _degenerate()
    a = sampling_oracle(b, zero, [0.0], [0.0], draws=5000, seed=4)
    c = sampling_oracle(b, zero, [0.0], [0.0], draws=5000, seed=4)
    assert a == c


def test_oracle_rejects_few_draws():
    b, zero = _degenerate()
    with pytest.raises(ValueError, match="1000"):
        sampling_oracle(b, zero, [0.0], [0.0], draws=999)


# -- growth-shaped rows ------------------------------------------------------------------


def test_growth_rows_shape():
    rows = growth_like_rows(0)
    assert len(rows) == 27 * 4
    assert {r[1] for r in rows} == {8.0, 10.0, 12.0, 14.0}
    assert len({r[0] for r in rows if r[2] == "M"}) == 16
    assert growth_like_rows(0) == rows


# -- spread of the oracle risk versus tai --------------------------------------------------
#
# Both share the same mean for the generating model, but their spreads come from
# different sources: Var(tai) = Var(-l(y)/n) shrinks like 1/S, while the random
# part of the oracle risk is a quadratic form in (beta - beta_hat) and shrinks
# like 1/S^2. The oracle is the more variable of the two only at S = 10 here.


_FASTER = pytest.mark.xfail(strict=True, reason="the oracle risk concentrates faster than tai once S >= 20")
SPREAD_SETUPS = [
    pytest.param(S, s2, marks=() if S == 10 else _FASTER) for S in (10, 20, 30) for s2 in (15.0, 20.0, 25.0)
]


@pytest.mark.parametrize("S, sigma2", SPREAD_SETUPS)
def test_oracle_risk_spread_exceeds_tai_spread(S, sigma2):
    cfg = SimulationConfig(subjects=S, sigma2=sigma2, replications=200, seed=S * 100 + int(sigma2))
    x = run_experiment(cfg).density_samples["model3"]
    assert x["oracle"].var(ddof=1) > x["tai"].var(ddof=1)
