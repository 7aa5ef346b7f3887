"""Random problem generators and dense reference formulas shared by the tests.

The reference formulas use explicit inverses on purpose: they are an
independent route to the same quantities the package computes with
triangular solves.
"""

import numpy as np
import pytest

from taic.model import DesignData, Gls, Gpr, Lmm, SquaredExponential


def random_spd(rng, m, floor=0.5):
    A = rng.standard_normal((m, m))
    return A @ A.T / m + floor * np.eye(m)


def random_lmm(rng, n=12, n_star=5, p=3, q=3, same_set=False):
    """Random mixed model; with ``same_set`` the prediction rows are the training rows."""
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    Z = rng.standard_normal((n, q))
    if same_set:
        X_star, Z_star = X.copy(), Z.copy()
    else:
        X_star = np.column_stack([np.ones(n_star), 2.0 * rng.standard_normal((n_star, p - 1))])
        Z_star = rng.standard_normal((n_star, q))
    G = random_spd(rng, q, floor=0.1)
    sigma2 = float(rng.uniform(0.3, 3.0))
    y = rng.standard_normal(n)
    data = DesignData(y=y, X=X, X_star=X_star, Z=Z, Z_star=Z_star)
    return data, Lmm(G, sigma2)


def random_gls(rng, n=10, n_star=6, p=3, same_set=False):
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    V = random_spd(rng, n)
    if same_set:
        X_star, V_star = X.copy(), V.copy()
    else:
        X_star = np.column_stack([np.ones(n_star), rng.standard_normal((n_star, p - 1))])
        V_star = random_spd(rng, n_star)
    data = DesignData(y=rng.standard_normal(n), X=X, X_star=X_star)
    return data, Gls(V, V_star)


def random_gpr(rng, n=15, n_star=6, p=2, d=2):
    Z = rng.uniform(0, 3, (n, d))
    Z_star = rng.uniform(0, 3, (n_star, d))
    X = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    X_star = np.column_stack([np.ones(n_star), rng.standard_normal((n_star, p - 1))])
    kernel = SquaredExponential(float(rng.uniform(0.5, 2.0)), tuple(rng.uniform(0.5, 2.0, d)))
    data = DesignData(y=rng.standard_normal(n), X=X, X_star=X_star, Z=Z, Z_star=Z_star)
    return data, Gpr(kernel, float(rng.uniform(0.2, 1.0)))


def dense_hats(X, X_star, V, C, cov_new):
    """Hat matrices written with explicit inverses."""
    Vi = np.linalg.inv(V)
    A = np.linalg.inv(X.T @ Vi @ X) @ X.T @ Vi
    P = X @ A
    I = np.eye(X.shape[0])
    return P + cov_new @ Vi @ (I - P), X_star @ A + C @ Vi @ (I - P)


def dense_c_tai(H, H_star, V, V_star, C, R, R_star):
    """Likelihood penalty as a direct transcription of the trace formula."""
    n, n_star = V.shape[0], V_star.shape[0]
    Ri, Rsi = np.linalg.inv(R), np.linalg.inv(R_star)
    log_ratio = np.linalg.slogdet(R_star)[1] / n_star - np.linalg.slogdet(R)[1] / n
    return (
        np.trace(Ri @ H @ V) / n
        - np.trace(Rsi @ H_star @ C.T) / n_star
        + 0.5 * (log_ratio + np.trace(Rsi @ V_star) / n_star - np.trace(Ri @ V) / n)
        + 0.5 * (np.trace(Rsi @ H_star @ V @ H_star.T) / n_star - np.trace(Ri @ H @ V @ H.T) / n)
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# -- acceptance report -----------------------------------------------------------

ACCEPTANCE_LINES = {}


def record_acceptance(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
