"""Outcome tests on released defendants: the released-sample difference in
misconduct means, the prediction-based marginal-sample test (ranking released
rows by estimated release propensity and comparing misconduct within the
bottom share), monotonicity sign-stability diagnostics, and leave-one-out
rank-correlation validity checks for the marginal-identification argument.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import sample as smp
from .errors import DataError, EstimationError
from .estimation import ols_fe, probit_fit, replicate_rng
from .selection import first_stage_columns

FIVE_PREDICTORS = ["prev_case", "prev_misconduct", "prev_conviction",
                   "severity_prev_case", "severity_current"]

FOURTEEN_PREDICTORS = [
    smp.GROUP, "prev_case", "n_prev_cases", "prev_misconduct", "prev_conviction",
    "severity_prev_case", "severity_current", "cy_avg_severity", "cy_n_cases",
    "cy_n_judges", "judge_leniency", "judge_leniency_sq",
    "attorney_quality", "attorney_quality_sq",
]


# --- rank correlations ------------------------------------------------------

def _merge_count(arr: np.ndarray) -> int:
    """Count strict inversions (arr[i] > arr[j] for i < j) by merge sort."""
    a = list(arr)
    n = len(a)
    buf = a.copy()
    inv = 0
    width = 1
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if a[j] < a[i]:
                    inv += mid - i
                    buf[k] = a[j]
                    j += 1
                else:
                    buf[k] = a[i]
                    i += 1
                k += 1
            buf[k:hi] = a[i:mid] if i < mid else a[j:hi]
        a, buf = buf, a
        width *= 2
    return inv


def _tie_pair_count(values: np.ndarray) -> int:
    _, counts = np.unique(values, return_counts=True)
    return int(np.sum(counts * (counts - 1) // 2))


def kendall_tau_b(x, y) -> float:
    """Kendall tau-b with tie corrections, discordances counted by an
    O(n log n) merge sort."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.shape[0] < 2:
        raise DataError("rank correlation needs two equal-length vectors, n >= 2")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DataError("rank correlation undefined for a zero-variance vector")
    n = x.shape[0]
    n0 = n * (n - 1) // 2
    order = np.lexsort((y, x))
    xs, ys = x[order], y[order]
    n1 = _tie_pair_count(xs)
    n2 = _tie_pair_count(ys)
    _, joint = np.unique(np.column_stack([xs, ys]), axis=0, return_counts=True)
    n3 = int(np.sum(joint * (joint - 1) // 2))
    discordant = _merge_count(ys)
    s = n0 - n1 - n2 + n3 - 2 * discordant
    denom = np.sqrt(float(n0 - n1) * float(n0 - n2))
    return float(s / denom)


def _average_ranks(v: np.ndarray) -> np.ndarray:
    order = np.argsort(v, kind="mergesort")
    ranks = np.empty(len(v), dtype=float)
    sv = v[order]
    i = 0
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.shape[0] < 2:
        raise DataError("rank correlation needs two equal-length vectors, n >= 2")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise DataError("rank correlation undefined for a zero-variance vector")
    rx, ry = _average_ranks(x), _average_ranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx @ ry) / np.sqrt((rx @ rx) * (ry @ ry)))


def rank_correlations(x, y) -> tuple[float, float]:
    """(Spearman rho, Kendall tau-b) for two vectors."""
    return spearman_rho(x, y), kendall_tau_b(x, y)


# --- released-sample outcome tests ------------------------------------------

@dataclass
class KPTResult:
    gap: float
    se: float
    mean_misconduct: float
    n_by_group: dict


def kpt_test(sample: smp.EstimationSample) -> KPTResult:
    """Misconduct difference in means across all released defendants (an OLS
    of misconduct on the group flag), clustered at court-by-year."""
    rel = sample.released().df
    for g in (0, 1):
        if not (rel[smp.GROUP] == g).any():
            raise DataError(f"no released defendants in group {g}")
    X = pd.DataFrame({"const": np.ones(len(rel)),
                      "group": rel[smp.GROUP].to_numpy(dtype=float)})
    fit = ols_fe(rel[smp.MISCONDUCT].to_numpy(dtype=float), X,
                 cluster_key=rel[smp.COURT_YEAR].to_numpy())
    return KPTResult(
        gap=fit.coef("group"),
        se=float(fit.se["group"]),
        mean_misconduct=float(rel[smp.MISCONDUCT].mean()),
        n_by_group={g: int((rel[smp.GROUP] == g).sum()) for g in (0, 1)},
    )


@dataclass
class PBOTResult:
    marginal_share: float
    marginal_row_ids: np.ndarray
    diff_in_means: float
    bootstrap_se: float
    marginal_sample_mean_misconduct: float
    n_marginal_by_group: dict
    overall_mean_misconduct: float
    propensity_fit: object = None


def _propensity_design(sample, df, fe_mode: str):
    if fe_mode == "covariates":
        X = sample.design(first_stage_columns(sample), frame=df)
    elif fe_mode == "dummies":
        cols = list(sample.individual_controls) + list(sample.judge_attorney_controls)
        X = sample.design(cols, frame=df)
        levels = sorted(pd.unique(df[smp.COURT_YEAR]))
        for lev in levels[1:]:
            X[f"fe_{lev}"] = (df[smp.COURT_YEAR] == lev).astype(float).to_numpy()
    else:
        raise DataError(f"unknown fe_mode {fe_mode!r}")
    X.insert(1, "group", df[smp.GROUP].to_numpy(dtype=float))
    return X


def _marginal_mask(pscore_released: np.ndarray, share: float) -> np.ndarray:
    """Bottom-share marginal set; boundary ties admitted in ascending row
    order until the count target is met."""
    n = pscore_released.shape[0]
    m = int(round(share * n))
    m = max(min(m, n), 0)
    order = np.lexsort((np.arange(n), pscore_released))
    mask = np.zeros(n, dtype=bool)
    mask[order[:m]] = True
    return mask


def _pbot_once(sample, df, share, fe_mode):
    X = _propensity_design(sample, df, fe_mode)
    fit = probit_fit(df[smp.RELEASED].to_numpy(dtype=float), X)
    rel_mask = (df[smp.RELEASED] == 1).to_numpy()
    pscore_rel = fit.predicted_probability[rel_mask]
    rel = df.loc[rel_mask].reset_index(drop=True)
    marg = _marginal_mask(pscore_rel, share)
    groups = rel[smp.GROUP].to_numpy()
    mc = rel[smp.MISCONDUCT].to_numpy(dtype=float)
    n_by_group = {g: int(((groups == g) & marg).sum()) for g in (0, 1)}
    if min(n_by_group.values()) == 0:
        raise DataError("a group is absent from the marginal set; "
                        "increase marginal_share")
    gap = float(mc[(groups == 1) & marg].mean() - mc[(groups == 0) & marg].mean())
    return gap, marg, mc, n_by_group, fit, rel_mask


def pbot(sample: smp.EstimationSample, marginal_share: float = 0.10, *,
         bootstrap_b: int = 200, seed: int = 0,
         fe_mode: str = "covariates") -> PBOTResult:
    """Prediction-based outcome test on propensity-ranked marginal releases.

    Fits the release propensity on the benchmark regressor set, labels the
    bottom ``marginal_share`` of released defendants as marginal, and
    compares misconduct means between groups inside that set.  The bootstrap
    refits the propensity per replicate because the selection rule depends on
    an estimated score.
    """
    if not 0 < marginal_share <= 1:
        raise DataError("marginal_share must lie in (0, 1]")
    df = sample.df
    gap, marg, mc, n_by_group, fit, rel_mask = _pbot_once(
        sample, df, marginal_share, fe_mode)

    n = len(df)
    reps = []
    failures = 0
    for b in range(bootstrap_b):
        rng = replicate_rng(seed, b)
        idx = rng.integers(0, n, size=n)
        try:
            reps.append(_pbot_once(sample, df.iloc[idx].reset_index(drop=True),
                                   marginal_share, fe_mode)[0])
        except (DataError, EstimationError):
            failures += 1
    if failures > 0.05 * bootstrap_b:
        raise EstimationError(
            f"{failures}/{bootstrap_b} propensity bootstrap replicates failed")

    row_ids = np.flatnonzero(rel_mask)[marg]
    return PBOTResult(
        marginal_share=marginal_share,
        marginal_row_ids=row_ids,
        diff_in_means=gap,
        bootstrap_se=float(np.std(reps, ddof=1)) if len(reps) > 1 else float("nan"),
        marginal_sample_mean_misconduct=float(mc[marg].mean()),
        n_marginal_by_group=n_by_group,
        overall_mean_misconduct=float(np.nanmean(mc)),
        propensity_fit=fit,
    )


def propensity_histogram(sample: smp.EstimationSample, *, fe_mode: str = "covariates",
                         percentile_cap: float = 20.0, n_bins: int = 40) -> pd.DataFrame:
    """Histogram bin data of the released-defendant propensity distribution by
    group, zoomed up to the given percentile of the pooled distribution."""
    df = sample.df
    X = _propensity_design(sample, df, fe_mode)
    fit = probit_fit(df[smp.RELEASED].to_numpy(dtype=float), X)
    rel_mask = (df[smp.RELEASED] == 1).to_numpy()
    ps = fit.predicted_probability[rel_mask]
    groups = df.loc[rel_mask, smp.GROUP].to_numpy()
    cap = np.percentile(ps, percentile_cap)
    edges = np.linspace(ps.min(), cap, n_bins + 1)
    rows = []
    for g in (0, 1):
        counts, _ = np.histogram(ps[groups == g], bins=edges)
        for b in range(n_bins):
            rows.append((g, float(edges[b]), float(edges[b + 1]), int(counts[b])))
    return pd.DataFrame(rows, columns=["group", "bin_low", "bin_high", "count"])


# --- monotonicity sign-stability --------------------------------------------

@dataclass
class MonotonicityResult:
    outcome: str
    table: pd.DataFrame
    consistency_score: float
    predictors: list
    flagged_cells: list = field(default_factory=list)


def default_partitions(sample: smp.EstimationSample) -> dict:
    """The standard subsample pairs: group, any extra partition columns,
    judge-leniency halves, attorney-quality halves, court size by cases and
    judges, court severity halves (continuous splits at the median)."""
    df = sample.df
    parts: dict[str, np.ndarray] = {}
    parts["group1"] = (df[smp.GROUP] == 1).to_numpy()
    parts["group0"] = (df[smp.GROUP] == 0).to_numpy()
    for col in sample.extra_partitions:
        med = df[col].median()
        parts[f"{col}_low"] = (df[col] <= med).to_numpy()
        parts[f"{col}_high"] = (df[col] > med).to_numpy()
    splits = [("judge_leniency", "judge_leniency"),
              ("attorney_quality", "attorney_quality"),
              ("court_cases", "cy_n_cases"),
              ("court_judges", "cy_n_judges")]
    if "cy_avg_severity" in df.columns:
        splits.append(("court_severity", "cy_avg_severity"))
    for label, col in splits:
        med = df[col].median()
        parts[f"{label}_low"] = (df[col] <= med).to_numpy()
        parts[f"{label}_high"] = (df[col] > med).to_numpy()
    return parts


def monotonicity_check(sample: smp.EstimationSample, outcome: str,
                       partitions: dict | None = None,
                       predictors: list | None = None) -> MonotonicityResult:
    """Coefficient sign stability of the history/severity predictors across
    subsamples, for the release or misconduct outcome."""
    if outcome not in ("release", "misconduct"):
        raise DataError("outcome must be 'release' or 'misconduct'")
    predictors = list(predictors) if predictors is not None else \
        [c for c in FIVE_PREDICTORS if c in sample.df.columns]
    if not predictors:
        raise DataError("no monotonicity predictors available in this sample")
    partitions = partitions if partitions is not None else default_partitions(sample)

    base = sample.df if outcome == "release" else \
        sample.df[sample.df[smp.RELEASED] == 1].reset_index(drop=True)
    ycol = smp.RELEASED if outcome == "release" else smp.MISCONDUCT

    def fit_cell(frame):
        X = sample.design(predictors, frame=frame)
        return ols_fe(frame[ycol].to_numpy(dtype=float), X,
                      cluster_key=frame[smp.COURT_YEAR].to_numpy())

    rows = []
    full_fit = fit_cell(base)
    rows.append(("all", full_fit))
    for cell, mask in partitions.items():
        mask = np.asarray(mask, dtype=bool)
        sub_mask = mask if outcome == "release" else \
            mask[(sample.df[smp.RELEASED] == 1).to_numpy()]
        frame = base.loc[sub_mask].reset_index(drop=True)
        if frame.empty:
            rows.append((cell, None))
            continue
        try:
            rows.append((cell, fit_cell(frame)))
        except EstimationError:
            rows.append((cell, None))

    table_rows = []
    for cell, fit in rows:
        rec: dict = {"cell": cell}
        for p in predictors:
            if fit is not None and p in fit.coefficients.index:
                rec[f"{p}_coef"] = fit.coef(p)
                rec[f"{p}_se"] = float(fit.se[p])
            else:
                rec[f"{p}_coef"] = np.nan
                rec[f"{p}_se"] = np.nan
        table_rows.append(rec)
    table = pd.DataFrame(table_rows).set_index("cell")

    full_signs = np.sign(table.loc["all", [f"{p}_coef" for p in predictors]].to_numpy())
    matches, total, flagged = 0, 0, []
    for cell in table.index:
        if cell == "all":
            continue
        coefs = table.loc[cell, [f"{p}_coef" for p in predictors]].to_numpy(dtype=float)
        for p_idx, val in enumerate(coefs):
            if np.isnan(val):
                continue
            total += 1
            if np.sign(val) == full_signs[p_idx]:
                matches += 1
            else:
                flagged.append((cell, predictors[p_idx]))
    score = matches / total if total else float("nan")
    return MonotonicityResult(outcome=outcome, table=table,
                              consistency_score=score, predictors=predictors,
                              flagged_cells=flagged)


# --- leave-one-out rank validity --------------------------------------------

@dataclass
class RankValidityTable:
    table: pd.DataFrame  # rows per excluded predictor, four rank statistics
    marginal_share: float
    n_cells_by_predictor: dict


def _fit_pscore(df, predictors, year_fe: bool):
    X = pd.DataFrame({"const": np.ones(len(df))})
    for c in predictors:
        X[c] = df[c].to_numpy(dtype=float)
    if year_fe:
        years = sorted(pd.unique(df[smp.YEAR]))
        for yv in years[1:]:
            X[f"year_{yv}"] = (df[smp.YEAR] == yv).astype(float).to_numpy()
    fit = probit_fit(df[smp.RELEASED].to_numpy(dtype=float), X)
    return fit.predicted_probability


def rank_validity(sample: smp.EstimationSample, predictors: list | None = None,
                  marginal_share: float = 0.10, *,
                  year_fe: bool = False) -> RankValidityTable:
    """Leave-one-out validity exercise for the marginal-identification
    ranking.

    For each excluded predictor: refit the propensity on the rest, rebuild
    the marginal set, aggregate released rows into cells over all value
    combinations of the remaining predictors (continuous ones binarized at
    the released-sample median), and rank-correlate the cell-level base
    marginal probability with the restricted marginal share (expected
    positive) and the restricted propensity (expected negative).
    """
    df = sample.df
    predictors = list(predictors) if predictors is not None else \
        [c for c in FOURTEEN_PREDICTORS if c in df.columns]
    missing = [c for c in predictors if c not in df.columns]
    if missing:
        raise DataError(f"predictors missing from sample: {missing}")
    for c in predictors:
        if df[c].nunique() < 2:
            raise DataError(f"degenerate predictor {c!r} (constant)")

    rel_mask = (df[smp.RELEASED] == 1).to_numpy()
    ps_base = _fit_pscore(df, predictors, year_fe)
    base_marg = _marginal_mask(ps_base[rel_mask], marginal_share)

    rel = df.loc[rel_mask].reset_index(drop=True)
    medians = {c: float(rel[c].median()) for c in predictors}

    rows = []
    n_cells = {}
    for excluded in predictors:
        remaining = [c for c in predictors if c != excluded]
        ps_r = _fit_pscore(df, remaining, year_fe)
        marg_r = _marginal_mask(ps_r[rel_mask], marginal_share)

        cell_frame = pd.DataFrame({
            c: (rel[c].to_numpy(dtype=float) > medians[c]).astype(np.int8)
            for c in remaining})
        cell_frame["_base"] = base_marg.astype(float)
        cell_frame["_restr"] = marg_r.astype(float)
        cell_frame["_ps"] = ps_r[rel_mask]
        agg = cell_frame.groupby(remaining, sort=True).agg(
            base=("_base", "mean"), restr=("_restr", "mean"), ps=("_ps", "mean"))
        n_cells[excluded] = len(agg)
        try:
            rho_m, tau_m = rank_correlations(agg["base"].to_numpy(),
                                             agg["restr"].to_numpy())
        except DataError:
            rho_m = tau_m = np.nan
        try:
            rho_p, tau_p = rank_correlations(agg["base"].to_numpy(),
                                             agg["ps"].to_numpy())
        except DataError:
            rho_p = tau_p = np.nan
        rows.append((excluded, rho_m, tau_m, rho_p, tau_p))

    table = pd.DataFrame(rows, columns=[
        "excluded_predictor", "spearman_marg_vs_conditional",
        "kendall_marg_vs_conditional", "spearman_pscore_vs_conditional",
        "kendall_pscore_vs_conditional"]).set_index("excluded_predictor")
    return RankValidityTable(table=table, marginal_share=marginal_share,
                             n_cells_by_predictor=n_cells)
