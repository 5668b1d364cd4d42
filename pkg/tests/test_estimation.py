import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special, stats

from releaseaudit.errors import EstimationError, SeparationError
from releaseaudit.estimation import (bootstrap, mills_ratio, ols_fe, probit_fit,
                                     probit_loglike_parts, wald_f_test)


def dummy_ols_oracle(y, X, fe_key):
    """Explicit-dummy regression: X plus one indicator per FE level."""
    levels = pd.unique(fe_key)
    D = np.column_stack([(fe_key == lev).astype(float) for lev in levels])
    full = np.column_stack([X, D])
    beta, *_ = np.linalg.lstsq(full, y, rcond=None)
    return beta[: X.shape[1]], y - full @ beta


def test_two_point_exact_fit():
    fit = ols_fe(np.array([1.0, 3.0]),
                 pd.DataFrame({"const": [1.0, 1.0], "x": [0.0, 1.0]}))
    assert fit.coef("const") == pytest.approx(1.0, abs=1e-12)
    assert fit.coef("x") == pytest.approx(2.0, abs=1e-12)
    assert np.max(np.abs(fit.residuals)) < 1e-12


def test_absorbed_equals_explicit_dummies():
    rng = np.random.default_rng(42)
    for _ in range(5):
        n = 200
        fe = rng.integers(0, 2, n)
        X = rng.normal(size=(n, 4))
        y = X @ np.array([1.0, -2.0, 0.5, 0.0]) + fe * 3.0 + rng.normal(size=n)
        fit = ols_fe(y, pd.DataFrame(X, columns=list("abcd")), fe_keys=fe)
        oracle, _ = dummy_ols_oracle(y, X, fe)
        assert np.max(np.abs(fit.coefficients.to_numpy() - oracle)) < 1e-8


def test_fe_idempotent_demeaning():
    rng = np.random.default_rng(0)
    n = 300
    fe = rng.integers(0, 7, n)
    X = rng.normal(size=(n, 3))
    once = X - np.vstack([X[fe == g].mean(axis=0) for g in fe])
    twice = once - np.vstack([once[fe == g].mean(axis=0) for g in fe])
    assert np.max(np.abs(twice - once)) < 1e-12


def test_ols_orthogonality_after_absorption():
    rng = np.random.default_rng(1)
    n = 400
    fe = rng.integers(0, 12, n)
    X = rng.normal(size=(n, 3))
    y = X[:, 0] - X[:, 2] + 0.3 * fe + rng.normal(size=n)
    fit = ols_fe(y, pd.DataFrame(X, columns=list("abc")), fe_keys=fe)
    Xd = X.copy().astype(float)
    for g in np.unique(fe):
        Xd[fe == g] -= Xd[fe == g].mean(axis=0)
    assert np.max(np.abs(Xd.T @ fit.residuals)) < 1e-8


def test_clustered_sandwich_hand_computed():
    rng = np.random.default_rng(7)
    n, k = 12, 2
    cluster = np.repeat([0, 1, 2], 4)
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = X @ np.array([0.5, 1.5]) + rng.normal(size=n)
    fit = ols_fe(y, pd.DataFrame(X, columns=["const", "x"]), cluster_key=cluster)

    beta = np.linalg.solve(X.T @ X, X.T @ y)
    e = y - X @ beta
    bread = np.linalg.inv(X.T @ X)
    meat = np.zeros((k, k))
    for g in range(3):
        sg = X[cluster == g].T @ e[cluster == g]
        meat += np.outer(sg, sg)
    factor = (3 / 2) * ((n - 1) / (n - k))
    vcov = factor * bread @ meat @ bread
    assert np.max(np.abs(fit.vcov.to_numpy() - vcov)) < 1e-10


def test_each_row_own_cluster_matches_hc_sandwich():
    rng = np.random.default_rng(3)
    n, k = 60, 3
    X = np.column_stack([np.ones(n), rng.normal(size=(n, k - 1))])
    y = X @ np.array([1.0, 2.0, -1.0]) + rng.normal(size=n)
    fit = ols_fe(y, pd.DataFrame(X, columns=["const", "a", "b"]))
    beta = np.linalg.solve(X.T @ X, X.T @ y)
    e = y - X @ beta
    bread = np.linalg.inv(X.T @ X)
    meat = X.T @ (X * (e ** 2)[:, None])
    hc = bread @ meat @ bread * (n / (n - 1)) * ((n - 1) / (n - k))
    assert np.max(np.abs(fit.vcov.to_numpy() - hc)) < 1e-10


def test_clustered_matches_classical_under_homoskedasticity():
    rng = np.random.default_rng(11)
    n = 20000
    x = rng.normal(size=n)
    y = 1.0 + 0.5 * x + rng.normal(size=n)
    cluster = rng.integers(0, 200, n)
    X = pd.DataFrame({"const": np.ones(n), "x": x})
    fit = ols_fe(y, X, cluster_key=cluster)
    sigma2 = fit.residuals @ fit.residuals / (n - 2)
    classical = sigma2 * np.linalg.inv(X.to_numpy().T @ X.to_numpy())
    ratio = fit.se["x"] / np.sqrt(classical[1, 1])
    assert 0.8 < ratio < 1.2


def test_single_cluster_errors():
    with pytest.raises(EstimationError):
        ols_fe(np.arange(4.0), pd.DataFrame({"const": np.ones(4)}),
               cluster_key=np.zeros(4))


def test_collinear_column_dropped_with_warning():
    rng = np.random.default_rng(5)
    x = rng.normal(size=50)
    X = pd.DataFrame({"const": np.ones(50), "x": x, "x2": 2 * x})
    with pytest.warns(UserWarning, match="x2"):
        fit = ols_fe(x + 1, X)
    assert "x2" in fit.dropped_columns


def test_r_squared_on_undemeaned_outcome():
    rng = np.random.default_rng(9)
    n = 500
    fe = rng.integers(0, 5, n)
    x = rng.normal(size=n)
    y = x + fe * 2.0 + 0.1 * rng.normal(size=n)
    fit = ols_fe(y, pd.DataFrame({"x": x}), fe_keys=fe)
    ybar = y - y.mean()
    r2_expected = 1 - fit.residuals @ fit.residuals / (ybar @ ybar)
    assert fit.r_squared == pytest.approx(r2_expected, abs=1e-12)
    assert 0.9 < fit.r_squared <= 1.0


# --- probit ------------------------------------------------------------------

def test_probit_symmetric_cells():
    fit = probit_fit(np.array([0, 1, 0, 1]),
                     pd.DataFrame({"const": np.ones(4), "x": [0.0, 0.0, 1.0, 1.0]}))
    assert abs(fit.coef("const")) < 1e-10
    assert abs(fit.coef("x")) < 1e-10
    assert np.allclose(fit.predicted_probability, 0.5)


def test_probit_intercept_only_inverse_cdf():
    y = np.zeros(100)
    y[:84] = 1.0
    fit = probit_fit(y, pd.DataFrame({"const": np.ones(100)}))
    assert fit.coef("const") == pytest.approx(special.ndtri(0.84), abs=1e-8)
    assert fit.coef("const") == pytest.approx(0.9945, abs=1e-4)


def test_probit_separation_error():
    x = np.linspace(-2, 2, 80)
    y = (x > 0).astype(float)
    with pytest.raises(SeparationError):
        probit_fit(y, pd.DataFrame({"const": np.ones(80), "x": x}))


def test_probit_score_matches_finite_differences():
    rng = np.random.default_rng(13)
    n, k = 300, 3
    X = np.column_stack([np.ones(n), rng.normal(size=(n, k - 1))])
    y = (X @ np.array([0.2, 0.8, -0.5]) + rng.normal(size=n) > 0).astype(float)
    h = 1e-5
    for _ in range(5):
        beta = rng.normal(scale=0.5, size=k)
        _, score, _ = probit_loglike_parts(beta, X, y)
        fd = np.empty(k)
        for j in range(k):
            ej = np.zeros(k)
            ej[j] = h
            lp, *_ = probit_loglike_parts(beta + ej, X, y)
            lm, *_ = probit_loglike_parts(beta - ej, X, y)
            fd[j] = (lp - lm) / (2 * h)
        assert np.max(np.abs(score - fd) / (np.abs(fd) + 1e-8)) < 1e-4


# --- inverse Mills -----------------------------------------------------------

def test_mills_known_values():
    assert mills_ratio(0.0) == pytest.approx(0.7978845608, abs=1e-10)
    assert mills_ratio(1.96) == pytest.approx(0.0599, abs=1e-4)


def test_mills_deep_tail_matches_mp_reference():
    mp = pytest.importorskip("mpmath")
    mp.mp.dps = 50
    for x in (-8.0, -10.0, -15.0, -25.0):
        ref = float(mp.npdf(x) / mp.ncdf(x))
        assert abs(mills_ratio(x) - ref) / ref < 1e-10
    assert mills_ratio(-10.0) == pytest.approx(10.0981, abs=1e-4)


# --- bootstrap ---------------------------------------------------------------

def test_bootstrap_se_matches_analytic_for_bernoulli_mean():
    rng = np.random.default_rng(21)
    n = 10_000
    data = pd.DataFrame({"v": (rng.random(n) < 0.5).astype(float)})
    res = bootstrap(lambda df: df["v"].mean(), data, B=200, seed=4)
    analytic = np.sqrt(0.25 / n)
    assert abs(res.se - analytic) / analytic < 0.15


def test_bootstrap_determinism():
    rng = np.random.default_rng(2)
    data = pd.DataFrame({"v": rng.normal(size=500)})
    a = bootstrap(lambda df: df["v"].mean(), data, B=60, seed=9)
    b = bootstrap(lambda df: df["v"].mean(), data, B=60, seed=9)
    assert a.se == b.se
    assert np.array_equal(a.estimates, b.estimates)


def test_bootstrap_minimum_b():
    data = pd.DataFrame({"v": np.arange(10.0)})
    with pytest.raises(EstimationError):
        bootstrap(lambda df: df["v"].mean(), data, B=10, seed=0)


def test_bootstrap_failure_rate_guard():
    data = pd.DataFrame({"v": np.arange(50.0)})

    def bad(df):
        raise ValueError("boom")

    with pytest.raises(EstimationError, match="replicates failed"):
        bootstrap(bad, data, B=60, seed=0)


def test_bootstrap_cluster_resampling_keeps_clusters_whole():
    data = pd.DataFrame({"v": np.arange(30.0), "g": np.repeat(np.arange(6), 5)})
    seen = []

    def stat(df):
        seen.append(df["g"].value_counts())
        return df["v"].mean()

    bootstrap(stat, data, B=55, seed=1, cluster_key="g")
    for counts in seen[:5]:
        assert all(c % 5 == 0 for c in counts)


# --- Wald --------------------------------------------------------------------

def test_wald_single_coefficient_identity():
    rng = np.random.default_rng(17)
    n = 200
    x = rng.normal(size=n)
    y = 1 + 0.4 * x + rng.normal(size=n)
    fit = ols_fe(y, pd.DataFrame({"const": np.ones(n), "x": x}),
                 cluster_key=rng.integers(0, 40, n))
    f, _ = wald_f_test(fit, ["x"])
    assert f == pytest.approx((fit.coef("x") / fit.se["x"]) ** 2, rel=1e-10)


def test_wald_strong_predictor_large_f():
    rng = np.random.default_rng(19)
    n = 2000
    x = rng.normal(size=n)
    y = 1 + 1.0 * x + rng.normal(size=n)
    fit = ols_fe(y, pd.DataFrame({"const": np.ones(n), "x": x}),
                 cluster_key=rng.integers(0, 100, n))
    f, p = wald_f_test(fit, ["x"])
    assert f > 10
    assert p < 1e-6


def test_wald_null_pvalues_uniform():
    rng = np.random.default_rng(23)
    n, G = 500, 100
    cluster = np.repeat(np.arange(G), n // G)
    pvals = []
    for _ in range(200):
        x = rng.normal(size=n)
        y = 1.0 + rng.normal(size=n)
        fit = ols_fe(y, pd.DataFrame({"const": np.ones(n), "x": x}),
                     cluster_key=cluster)
        pvals.append(wald_f_test(fit, ["x"])[1])
    ks = stats.kstest(pvals, "uniform")
    assert ks.pvalue > 0.01


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=2, max_value=6), st.integers(min_value=0, max_value=10 ** 6))
def test_fe_absorption_property(n_levels, seed):
    rng = np.random.default_rng(seed)
    n = 80
    fe = rng.integers(0, n_levels, n)
    X = rng.normal(size=(n, 2))
    y = X[:, 0] + 0.5 * fe + rng.normal(size=n)
    fit = ols_fe(y, pd.DataFrame(X, columns=["a", "b"]), fe_keys=fe)
    oracle, _ = dummy_ols_oracle(y, X, fe)
    assert np.max(np.abs(fit.coefficients.to_numpy() - oracle)) < 1e-8
