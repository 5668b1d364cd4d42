"""Core numerical engine: OLS with absorbed fixed effects and cluster-robust
covariance, probit maximum likelihood, a deterministic bootstrap driver, and
Wald tests.

Higher modules are thin compositions over these four entry points.  All fits
are pure functions of immutable inputs; the bootstrap derives one RNG stream
per replicate from ``(seed, replicate)`` so results do not depend on
execution order.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import special, stats

from .errors import CollinearityError, ConvergenceError, EstimationError, SeparationError

__all__ = [
    "FitResult",
    "ProbitFit",
    "BootstrapResult",
    "ols_fe",
    "probit_fit",
    "probit_loglike_parts",
    "bootstrap",
    "replicate_rng",
    "wald_f_test",
    "mills_ratio",
]

DEMEAN_TOL = 1e-10
DEMEAN_MAX_SWEEPS = 1000


def mills_ratio(x):
    """Inverse Mills ratio ``lambda(x) = phi(x) / Phi(x)``.

    Evaluated as ``exp(logpdf - log_ndtr)`` which stays accurate deep in the
    left tail (``log_ndtr`` switches to an asymptotic series), where the naive
    ratio would divide two underflowing numbers.
    """
    x = np.asarray(x, dtype=float)
    return np.exp(stats.norm.logpdf(x) - special.log_ndtr(x))


@dataclass
class FitResult:
    """Linear fit with absorbed fixed effects and clustered covariance."""

    coefficients: pd.Series
    vcov: pd.DataFrame
    se: pd.Series
    r_squared: float
    n_obs: int
    n_clusters: int
    absorbed_fe_count: int
    residuals: np.ndarray
    converged: bool
    dropped_columns: list = field(default_factory=list)

    @property
    def params(self) -> pd.Series:
        return self.coefficients

    def coef(self, name: str) -> float:
        return float(self.coefficients[name])

    def tstat(self, name: str) -> float:
        return float(self.coefficients[name] / self.se[name])


@dataclass
class ProbitFit:
    """Probit maximum-likelihood fit."""

    coefficients: pd.Series
    vcov: pd.DataFrame
    log_likelihood: float
    linear_index: np.ndarray
    predicted_probability: np.ndarray
    converged: bool
    n_obs: int
    n_iter: int

    @property
    def se(self) -> pd.Series:
        return pd.Series(np.sqrt(np.diag(self.vcov.to_numpy())), index=self.coefficients.index)

    def coef(self, name: str) -> float:
        return float(self.coefficients[name])


@dataclass
class BootstrapResult:
    se: float
    ci_low: float
    ci_high: float
    estimates: np.ndarray
    n_failures: int
    point: float | None = None


def _factorize(key) -> tuple[np.ndarray, int]:
    codes, uniques = pd.factorize(np.asarray(key), use_na_sentinel=False)
    return codes.astype(np.int64), len(uniques)


def _demean_once(mat: np.ndarray, codes: np.ndarray, counts: np.ndarray) -> np.ndarray:
    out = mat.copy()
    for j in range(mat.shape[1]):
        sums = np.bincount(codes, weights=mat[:, j], minlength=counts.shape[0])
        out[:, j] -= (sums / counts)[codes]
    return out


def _absorb(mat: np.ndarray, code_list: list[np.ndarray], count_list: list[np.ndarray]):
    """Alternating within-group projections until max entry change < DEMEAN_TOL."""
    if len(code_list) == 1:
        # one-way absorption is exact in a single pass
        return _demean_once(mat, code_list[0], count_list[0]), True
    cur = mat
    for _ in range(DEMEAN_MAX_SWEEPS):
        nxt = cur
        for codes, counts in zip(code_list, count_list):
            nxt = _demean_once(nxt, codes, counts)
        delta = np.max(np.abs(nxt - cur)) if cur.size else 0.0
        cur = nxt
        if delta < DEMEAN_TOL:
            return cur, True
    return cur, False


def _select_independent_columns(mat: np.ndarray, names: list[str], tol: float = 1e-8):
    """Greedy left-to-right scan keeping columns with nondegenerate residual
    variation given the columns already kept.  Deterministic drop order."""
    kept: list[int] = []
    dropped: list[str] = []
    basis = np.empty((mat.shape[0], 0))
    for j in range(mat.shape[1]):
        col = mat[:, j]
        scale = np.sqrt(np.mean(col * col))
        if basis.shape[1]:
            coef, *_ = np.linalg.lstsq(basis, col, rcond=None)
            resid = col - basis @ coef
        else:
            resid = col
        if np.sqrt(np.mean(resid * resid)) <= tol * (scale + 1.0):
            dropped.append(names[j])
        else:
            kept.append(j)
            basis = np.column_stack([basis, col])
    return kept, dropped


def _as_design(X) -> tuple[np.ndarray, list[str]]:
    if isinstance(X, pd.DataFrame):
        return X.to_numpy(dtype=float), [str(c) for c in X.columns]
    arr = np.asarray(X, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    return arr, [f"x{j}" for j in range(arr.shape[1])]


def ols_fe(y, X, fe_keys=None, cluster_key=None, *, on_collinear: str = "drop",
           dof_adjust: bool = True) -> FitResult:
    """OLS of ``y`` on ``X`` with fixed effects absorbed by iterated
    within-demeaning and a cluster-robust sandwich covariance.

    Parameters
    ----------
    y : array-like, shape (n,)
    X : DataFrame or ndarray, shape (n, k)
        Passed as-is; include an intercept column explicitly when no fixed
        effects are absorbed.
    fe_keys : None, array-like, or list of array-like
        Fixed-effect group labels, one array per absorbed dimension.
    cluster_key : array-like or None
        Cluster labels for the sandwich covariance.  ``None`` treats every
        row as its own cluster (heteroskedasticity-robust).
    on_collinear : {"drop", "raise"}
        Collinear columns (after absorption) are dropped with a warning by
        default; "raise" turns them into a CollinearityError.
    dof_adjust : bool
        Apply the small-sample factor ``(G/(G-1)) * ((N-1)/(N-K))`` where K
        counts slope columns plus absorbed fixed-effect levels.

    Notes
    -----
    Coefficients agree with explicit-dummy OLS; the clustered covariance of
    the within regression equals the slope block of the dummy regression's
    sandwich under the same degrees-of-freedom convention.  R-squared is
    reported against the un-demeaned outcome.
    """
    y = np.asarray(y, dtype=float)
    mat, names = _as_design(X)
    n = y.shape[0]
    if mat.shape[0] != n:
        raise EstimationError(f"y has {n} rows but X has {mat.shape[0]}")

    if fe_keys is None:
        fe_list = []
    elif isinstance(fe_keys, (list, tuple)):
        fe_list = [k for k in fe_keys]
    else:
        fe_list = [fe_keys]

    absorbed_fe_count = 0
    converged = True
    if fe_list:
        code_list, count_list, levels = [], [], []
        for key in fe_list:
            codes, n_levels = _factorize(key)
            code_list.append(codes)
            count_list.append(np.bincount(codes, minlength=n_levels).astype(float))
            levels.append(n_levels)
        stacked = np.column_stack([y[:, None], mat])
        stacked, converged = _absorb(stacked, code_list, count_list)
        if not converged:
            raise ConvergenceError("fixed-effect absorption did not converge")
        y_t = stacked[:, 0]
        mat_t = stacked[:, 1:]
        # first dimension absorbs the grand mean; later ones add levels - 1
        absorbed_fe_count = levels[0] + sum(lv - 1 for lv in levels[1:])
    else:
        y_t = y
        mat_t = mat

    kept, dropped = _select_independent_columns(mat_t, names)
    if dropped:
        msg = f"dropping collinear columns: {dropped}"
        if on_collinear == "raise":
            raise CollinearityError(msg)
        warnings.warn(msg, stacklevel=2)
    if not kept:
        raise CollinearityError("no linearly independent columns remain after absorption")
    mat_t = mat_t[:, kept]
    kept_names = [names[j] for j in kept]

    beta, *_ = np.linalg.lstsq(mat_t, y_t, rcond=None)
    resid = y_t - mat_t @ beta

    ss_res = float(resid @ resid)
    y_c = y - y.mean()
    ss_tot = float(y_c @ y_c)
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0

    if cluster_key is None:
        codes = np.arange(n, dtype=np.int64)
        n_clusters = n
    else:
        codes, n_clusters = _factorize(cluster_key)
    if n_clusters < 2:
        raise EstimationError("cluster-robust variance undefined with a single cluster")

    xtx = mat_t.T @ mat_t
    bread = np.linalg.inv(xtx)
    # meat: sum over clusters of (X_g' e_g)(X_g' e_g)'
    k = mat_t.shape[1]
    scores = np.zeros((n_clusters, k))
    xe = mat_t * resid[:, None]
    np.add.at(scores, codes, xe)
    meat = scores.T @ scores

    k_total = k + absorbed_fe_count
    if dof_adjust:
        if n - k_total > 0:
            factor = (n_clusters / (n_clusters - 1)) * ((n - 1) / (n - k_total))
        else:
            warnings.warn("no residual degrees of freedom; standard errors undefined",
                          stacklevel=2)
            factor = np.nan
    else:
        factor = 1.0
    vcov = factor * bread @ meat @ bread
    vcov = 0.5 * (vcov + vcov.T)

    se = np.sqrt(np.diag(vcov))
    return FitResult(
        coefficients=pd.Series(beta, index=kept_names),
        vcov=pd.DataFrame(vcov, index=kept_names, columns=kept_names),
        se=pd.Series(se, index=kept_names),
        r_squared=r2,
        n_obs=n,
        n_clusters=n_clusters,
        absorbed_fe_count=absorbed_fe_count,
        residuals=resid,
        converged=converged,
        dropped_columns=dropped,
    )


def probit_loglike_parts(beta, X, y):
    """Probit log-likelihood, analytic score, and negative Hessian at beta."""
    mat, _ = _as_design(X)
    y = np.asarray(y, dtype=float)
    beta = np.asarray(beta, dtype=float)
    eta = mat @ beta
    ll = float(np.sum(y * special.log_ndtr(eta) + (1 - y) * special.log_ndtr(-eta)))
    lam_pos = mills_ratio(eta)     # phi/Phi
    lam_neg = mills_ratio(-eta)    # phi/(1-Phi)
    score = mat.T @ (y * lam_pos - (1 - y) * lam_neg)
    w = y * lam_pos * (lam_pos + eta) + (1 - y) * lam_neg * (lam_neg - eta)
    neg_hess = mat.T @ (mat * np.clip(w, 1e-12, None)[:, None])
    return ll, score, neg_hess


def probit_fit(y, X, *, max_iter: int = 100, score_tol: float = 1e-8,
               ll_tol: float = 1e-12) -> ProbitFit:
    """Probit fit by Newton-Raphson on the analytic score and Hessian.

    Convergence when the score max-norm falls below ``score_tol`` or the
    relative log-likelihood change falls below ``ll_tol``.  Divergence of a
    coefficient past +/-50 while the likelihood still climbs is reported as
    perfect separation.
    """
    y = np.asarray(y, dtype=float)
    mat, names = _as_design(X)
    n = y.shape[0]
    if set(np.unique(y)) - {0.0, 1.0}:
        raise EstimationError("probit outcome must be binary 0/1")
    if y.min() == y.max():
        raise EstimationError("probit outcome has a single class")

    kept, dropped = _select_independent_columns(mat, names)
    if dropped:
        warnings.warn(f"dropping collinear columns: {dropped}", stacklevel=2)
    mat = mat[:, kept]
    names = [names[j] for j in kept]
    k = mat.shape[1]

    beta = np.zeros(k)
    ll_old = -np.inf
    ll = None
    for it in range(1, max_iter + 1):
        ll, score, hess = probit_loglike_parts(beta, mat, y)

        if np.max(np.abs(score)) < score_tol:
            break
        if ll_old > -np.inf and abs(ll - ll_old) <= ll_tol * (abs(ll_old) + 1e-300):
            break
        if np.max(np.abs(beta)) > 50 and ll > ll_old:
            raise SeparationError(
                "perfect separation suspected: |coefficient| > 50 with rising likelihood")
        ll_old = ll
        try:
            step = np.linalg.solve(hess, score)
        except np.linalg.LinAlgError as exc:
            raise EstimationError(f"singular probit Hessian at iteration {it}") from exc
        beta = beta + step
    else:
        raise ConvergenceError(
            f"probit did not converge in {max_iter} iterations "
            f"(last |score|_max = {np.max(np.abs(score)):.3e}, ll = {ll:.6f})")

    ll, _, hess = probit_loglike_parts(beta, mat, y)
    eta = mat @ beta
    vcov = np.linalg.inv(hess)
    prob = np.clip(special.ndtr(eta), 1e-300, 1 - 1e-16)
    return ProbitFit(
        coefficients=pd.Series(beta, index=names),
        vcov=pd.DataFrame(0.5 * (vcov + vcov.T), index=names, columns=names),
        log_likelihood=ll,
        linear_index=eta,
        predicted_probability=prob,
        converged=True,
        n_obs=n,
        n_iter=it,
    )


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """RNG stream for one bootstrap replicate, independent of execution order."""
    return np.random.default_rng(np.random.SeedSequence(entropy=(int(seed), int(replicate))))


def bootstrap(statistic, data: pd.DataFrame, B: int, seed: int, *,
              cluster_key=None, max_failure_rate: float = 0.05) -> BootstrapResult:
    """Nonparametric bootstrap of ``statistic`` over rows of ``data``.

    ``statistic`` maps a resampled DataFrame to a float.  When
    ``cluster_key`` names a column (or supplies labels), whole clusters are
    resampled.  Replicate b uses the stream derived from ``(seed, b)``.
    """
    if B < 50:
        raise EstimationError("bootstrap requires B >= 50")
    n = len(data)
    if cluster_key is not None:
        labels = data[cluster_key].to_numpy() if isinstance(cluster_key, str) \
            else np.asarray(cluster_key)
        codes, n_groups = _factorize(labels)
        order = np.argsort(codes, kind="stable")
        bounds = np.searchsorted(codes[order], np.arange(n_groups + 1))
        members = [order[bounds[g]:bounds[g + 1]] for g in range(n_groups)]

    estimates = []
    failures: list[tuple[int, str]] = []
    for b in range(B):
        rng = replicate_rng(seed, b)
        if cluster_key is None:
            idx = rng.integers(0, n, size=n)
        else:
            picks = rng.integers(0, n_groups, size=n_groups)
            idx = np.concatenate([members[g] for g in picks]) if n_groups else np.array([], int)
        try:
            estimates.append(float(statistic(data.iloc[idx])))
        except Exception as exc:  # noqa: BLE001 - replicate failures are data, not bugs
            failures.append((b, repr(exc)))
    if len(failures) > max_failure_rate * B:
        log = "; ".join(f"rep {b}: {msg}" for b, msg in failures[:10])
        raise EstimationError(
            f"{len(failures)}/{B} bootstrap replicates failed (first: {log})")
    est = np.asarray(estimates, dtype=float)
    return BootstrapResult(
        se=float(np.std(est, ddof=1)),
        ci_low=float(np.percentile(est, 2.5)),
        ci_high=float(np.percentile(est, 97.5)),
        estimates=est,
        n_failures=len(failures),
    )


def wald_f_test(fit, coefficient_subset) -> tuple[float, float]:
    """Wald test that the named coefficients are jointly zero, in F form.

    Uses the fit's covariance; the denominator degrees of freedom are
    ``n_clusters - 1`` for clustered linear fits and ``n_obs - k`` for
    probit fits.
    """
    names = list(coefficient_subset)
    if not names:
        raise EstimationError("empty coefficient subset")
    missing = [c for c in names if c not in fit.coefficients.index]
    if missing:
        raise EstimationError(f"coefficients not in fit: {missing}")
    b = fit.coefficients[names].to_numpy()
    V = fit.vcov.loc[names, names].to_numpy()
    try:
        Vinv = np.linalg.inv(V)
    except np.linalg.LinAlgError as exc:
        raise EstimationError("singular covariance sub-matrix in Wald test") from exc
    q = len(names)
    stat = float(b @ Vinv @ b) / q
    if isinstance(fit, ProbitFit):
        df2 = max(fit.n_obs - len(fit.coefficients), 1)
    else:
        df2 = max(fit.n_clusters - 1, 1)
    pval = float(stats.f.sf(stat, q, df2))
    return stat, pval
