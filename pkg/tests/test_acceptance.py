"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v``; the lines are repeated in the
terminal summary under "acceptance criteria".
"""

import csv
import time

import numpy as np
import pytest

from conftest import random_gls, random_gpr, random_lmm, record_acceptance
from taic.cli import load_config, cmd_evaluate, main
from taic.criteria import c_tai, c_tai_biased, c_tai_gls, mahalanobis_correction, w_t
from taic.model import Gls, ResidualMode, realize
from taic.predict import gls_fit, hat_matrices
from taic.simulate import SimulationConfig, generate_replication, growth_like_rows, run_experiment, sampling_oracle

SUBJECTS = (10, 20, 30)
SIGMA2 = (15.0, 20.0, 25.0)


def _instances(count, seed):
    """Mixed bag of LMM, GPR and GLS problems with varied sizes."""
    rng = np.random.default_rng(seed)
    makers = (random_lmm, random_gpr, random_gls)
    for k in range(count):
        make = makers[k % 3]
        n = int(rng.integers(6, 30))
        n_star = int(rng.integers(2, 15))
        p = int(rng.integers(1, 4))
        if make is random_lmm:
            yield make(rng, n=n, n_star=n_star, p=p, q=int(rng.integers(1, 6)))
        else:
            yield make(rng, n=n, n_star=n_star, p=p)


def test_criterion_1_reduction_identities():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst_c, worst_m = 0.0, 0.0
    for _ in range(100):
        n = int(rng.integers(5, 40))
        data, spec = random_lmm(rng, n=n, p=int(rng.integers(1, 4)), q=int(rng.integers(1, 6)), same_set=True)
        b = realize(spec, data, ResidualMode.RESIDUAL)
        hats = hat_matrices(data, b)
        worst_c = max(worst_c, abs(c_tai(b, hats) - np.trace(hats.H) / data.n))
    for _ in range(100):
        n = int(rng.integers(5, 40))
        data, spec = random_gls(rng, n=n, p=int(rng.integers(1, 4)), same_set=True)
        b = realize(spec, data)
        worst_m = max(worst_m, abs(c_tai(b, hat_matrices(data, b)) - data.p / data.n))
    elapsed = time.perf_counter() - start
    ok = worst_c < 1e-10 and worst_m < 1e-10 and elapsed < 10
    assert record_acceptance(1, "reductions to tr(H)/n and p/n", ok,
                             f"max err {worst_c:.2e} / {worst_m:.2e}, {elapsed:.2f} s")


def test_criterion_2_gls_closed_form():
    rng = np.random.default_rng(202)
    worst = 0.0
    for _ in range(50):
        data, spec = random_gls(rng, n=int(rng.integers(5, 30)), n_star=int(rng.integers(2, 20)),
                                p=int(rng.integers(1, 5)))
        b = realize(spec, data)
        est = gls_fit(data, b)
        worst = max(worst, abs(c_tai_gls(data, b, est) - c_tai(b, hat_matrices(data, b, est))))
    assert record_acceptance(2, "GLS closed form equals general penalty", worst < 1e-9, f"max err {worst:.2e}")


def test_criterion_3_mahalanobis_identity():
    worst = 0.0
    for i, (data, spec) in enumerate(_instances(50, 303)):
        mode = list(ResidualMode)[i % 2]
        b = realize(spec, data, mode)
        hats = hat_matrices(data, b)
        log_ratio = np.linalg.slogdet(b.R_star)[1] / b.n_star - np.linalg.slogdet(b.R)[1] / b.n
        worst = max(worst, abs(mahalanobis_correction(b, hats) - (2 * c_tai(b, hats) - log_ratio)))
    assert record_acceptance(3, "Mahalanobis identity", worst < 1e-10, f"max err {worst:.2e}")


def test_criterion_4_hodges_reduction():
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(50):
        data, spec = random_lmm(rng, n=int(rng.integers(5, 40)), p=int(rng.integers(1, 4)),
                                q=int(rng.integers(1, 6)), same_set=True)
        b = realize(spec, data)
        hats = hat_matrices(data, b)
        # the preconditions hold by construction; check them rather than assume
        assert np.abs(hats.H_star - hats.H).max() < 1e-12
        assert np.abs(b.C - (b.V - spec.sigma2 * np.eye(data.n))).max() < 1e-12
        worst = max(worst, abs(w_t(b, hats) - 2 * spec.sigma2 * np.trace(hats.H) / data.n))
    assert record_acceptance(4, "Hodges reduction 2 sigma2 tr(H)/n", worst < 1e-10, f"max err {worst:.2e}")


def test_criterion_5_sampling_oracle_equivalence():
    start = time.perf_counter()
    misses, zs = [], []
    for seed in range(5):
        sim = generate_replication(SimulationConfig(subjects=2, sigma2=15.0, seed=seed), 0)
        b = realize(sim.spec, sim.data)
        hats = hat_matrices(sim.data, b)
        mc = sampling_oracle(b, hats, sim.mu, sim.mu_star, draws=100_000, seed=1000 + seed)
        biased = hats.scaled(0.5)
        mc_biased = sampling_oracle(b, biased, sim.mu, sim.mu_star, draws=100_000, seed=2000 + seed)
        checks = {
            "c_tai": (c_tai(b, hats), mc.c_tai),
            "w_t": (w_t(b, hats), mc.w_t),
            "c_tai_biased": (c_tai_biased(b, biased, sim.mu, sim.mu_star), mc_biased.c_tai),
        }
        for name, (value, est) in checks.items():
            zs.append(abs(value - est.mean) / est.se)
            if not est.covers(value, 3.0):
                misses.append(f"seed {seed} {name}")
    elapsed = time.perf_counter() - start
    ok = not misses and elapsed < 120
    assert record_acceptance(5, "penalties match Monte Carlo within 3 SE", ok,
                             f"max |z| {max(zs):.2f}, misses {misses or 'none'}, {elapsed:.1f} s")


def test_criterion_6_optimal_linear_predictor():
    worst = 0.0
    for i, (data, spec) in enumerate(_instances(20, 606)):
        b = realize(spec, data)
        hats = hat_matrices(data, b)
        beta = gls_fit(data, b).beta_hat
        B = b.C @ np.linalg.inv(b.V)
        a = data.X_star @ beta - B @ (data.X @ beta)
        worst = max(worst, float(np.abs(hats.f_star_hat - (a + B @ data.y)).max()))
    assert record_acceptance(6, "BLUP equals optimal affine predictor", worst < 1e-8, f"max err {worst:.2e}")


# -- simulation study -----------------------------------------------------------------


@pytest.fixture(scope="module")
def nine_setups():
    start = time.perf_counter()
    out = {}
    for S in SUBJECTS:
        for s2 in SIGMA2:
            seed = int(np.random.SeedSequence([7, S, int(s2)]).generate_state(1)[0])
            out[(S, s2)] = run_experiment(SimulationConfig(subjects=S, sigma2=s2, replications=100, seed=seed))
    return out, time.perf_counter() - start


def _paired(a, b):
    d = a - b
    return d.mean(), d.std(ddof=1) / np.sqrt(d.size)


def test_criterion_7_simulation_study(nine_setups):
    summaries, elapsed = nine_setups
    failures, dominance, lines = [], 0, []
    for (S, s2), summ in summaries.items():
        x = summ.density_samples["model3"]
        m, se = _paired(x["tai"], x["oracle"])
        if abs(m) > 3 * se:
            failures.append(f"(a) S={S} s2={s2:g}: tai-oracle {m:.4f} se {se:.4f}")
        for base in ("cai", "mai"):
            mb, seb = _paired(x[base], x["oracle"])
            if not mb < -3 * seb:
                failures.append(f"(b) S={S} s2={s2:g}: {base}-oracle {mb:.4f} se {seb:.4f}")
        risk = summ.risk_of_selected
        if not (risk["tAIC"] <= risk["cAIC"] and risk["tAIC"] <= risk["mAIC"]):
            failures.append(f"(c) S={S} s2={s2:g}: risks {risk['tAIC']:.4f} {risk['cAIC']:.4f} {risk['mAIC']:.4f}")
        agree = summ.agreement_rate["conditional"]
        dominance += agree["tAIC"] >= agree["cAIC"] and agree["tAIC"] >= agree["mAIC"]
        lines.append(f"S={S} s2={s2:g} tai-oracle z={m / se:+.2f} agree tAIC={agree['tAIC']:.2f} "
                     f"cAIC={agree['cAIC']:.2f} mAIC={agree['mAIC']:.2f}")
        assert summ.replications == 100 and not summ.failures
    if dominance < 7:
        failures.append(f"(d) agreement dominance in {dominance}/9 setups")
    for line in lines:
        print("   ", line)
    ok = not failures and elapsed < 600
    detail = f"{elapsed:.0f} s, dominance {dominance}/9" + (f", {'; '.join(failures)}" if failures else "")
    assert record_acceptance(7, "nine-setup simulation (a)-(d)", ok, detail)


def test_criterion_8_determinism(tmp_path):
    cfg = tmp_path / "sim.toml"
    cfg.write_text('workflow = "simulate"\nsubjects = [10, 20]\nsigma2 = [15]\nreplications = 5\nseed = 3\n')
    for k in range(2):
        assert main(["simulate", str(cfg), "--out", str(tmp_path / f"run{k}")]) == 0
    files = sorted(p.relative_to(tmp_path / "run0") for p in (tmp_path / "run0").rglob("*.csv"))
    same = all((tmp_path / "run0" / f).read_bytes() == (tmp_path / "run1" / f).read_bytes() for f in files)
    ok = len(files) == 2 and same
    assert record_acceptance(8, "simulate is byte-reproducible", ok, f"{len(files)} CSV files compared")


GROWTH_TOML = """workflow = "evaluate"
out = "out"
[data]
path = "growth.csv"
id = "subject"
time = "age"
response = "distance"
covariates = ["gender"]
categorical = ["gender"]
[split]
type = "by_time"
holdout = [14]
"""
GROWTH_TERMS = {"model1": '["age"]', "model2": '["age", "gender"]', "model3": '["age", "gender", "age:gender"]'}


def test_criterion_9_growth_workflow(tmp_path):
    text = GROWTH_TOML
    for name, terms in GROWTH_TERMS.items():
        text += f"""
[[models]]
name = "{name}"
terms = {terms}
[models.random]
type = "subject"
slopes = ["age"]
[models.covariance]
type = "lmm"
G = [[4.0, -0.2], [-0.2, 0.05]]
sigma2 = 1.7
"""
    (tmp_path / "run.toml").write_text(text)
    errors = {k: [] for k in ("tai", "cai", "mai")}
    for seed in range(20):
        with open(tmp_path / "growth.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["subject", "age", "gender", "distance"])
            w.writerows(growth_like_rows(seed))
        assert cmd_evaluate(load_config(tmp_path / "run.toml", "evaluate")) == 0
        with open(tmp_path / "out" / "evaluate.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["model"] for r in rows] == list(GROWTH_TERMS)
        assert len(rows[0]) - 1 == 5
        for r in rows:
            truth = float(r["holdout_neg_loglik"])
            for k in errors:
                errors[k].append(abs(float(r[k]) - truth))
    mean = {k: float(np.mean(v)) for k, v in errors.items()}
    ok = mean["tai"] < mean["cai"] and mean["tai"] < mean["mai"]
    detail = ", ".join(f"mean |{k} - realized| {v:.4f}" for k, v in mean.items())
    assert record_acceptance(9, "growth workflow: tai closest to realized holdout", ok, detail)
