"""Observational benchmark regressions: linear probability models of release
on the group flag and configurable control blocks, with court-by-year fixed
effects absorbed and standard errors clustered at the court-by-year level.

Variants cover the control-set columns, crime-category interactions, split
samples, and interaction designs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import sample as smp
from .errors import DataError, EstimationError
from .estimation import FitResult, ols_fe

CONTROL_BLOCKS = ("individual", "judge_attorney", "court_year_fe")

# named control-set columns in the order the report prints them
COLUMN_PRESETS = {
    "none": (),
    "individual": ("individual",),
    "judge_attorney": ("judge_attorney",),
    "court_fe": ("court_year_fe",),
    "full": ("individual", "judge_attorney", "court_year_fe"),
}


@dataclass
class BenchmarkSpec:
    control_sets: tuple = ()
    interaction_terms: list = field(default_factory=list)  # (name, indicator array)
    sample_filter: np.ndarray | None = None
    crime_interacted: bool = False
    use_court_covariates_instead_of_fe: bool = False

    def __post_init__(self):
        bad = [b for b in self.control_sets if b not in CONTROL_BLOCKS]
        if bad:
            raise DataError(f"unknown control blocks: {bad}")
        if self.crime_interacted and "individual" not in self.control_sets:
            raise DataError("crime-interacted runs require individual controls "
                            "(the non-interacted category indicators live there)")


@dataclass
class BenchmarkResult:
    name: str
    alpha_d: float
    se: float
    fit: FitResult
    mean_dep: float
    n_group1: int
    n_group0: int
    spec: BenchmarkSpec
    interaction_estimates: dict = field(default_factory=dict)

    @property
    def r_squared(self) -> float:
        return self.fit.r_squared


def _frame_for(sample: smp.EstimationSample, spec: BenchmarkSpec):
    df = sample.df
    if spec.sample_filter is not None:
        mask = np.asarray(spec.sample_filter, dtype=bool)
        if mask.shape[0] != len(df):
            raise DataError("sample_filter length mismatch")
        df = df.loc[mask].reset_index(drop=True)
        if df.empty:
            raise DataError("sample_filter removed every row")
    return df


def _design_and_keys(sample, spec, df, *, group_columns):
    blocks = [b for b in spec.control_sets if b != "court_year_fe"]
    use_fe = "court_year_fe" in spec.control_sets and \
        not spec.use_court_covariates_instead_of_fe
    cols = sample.control_columns(blocks)
    if "court_year_fe" in spec.control_sets and spec.use_court_covariates_instead_of_fe:
        cols = cols + list(sample.court_covariates)

    X = sample.design(cols, intercept=not use_fe, frame=df)
    for name, vals in reversed(group_columns):
        X.insert(1 if not use_fe else 0, name, vals)
    for name, indicator in spec.interaction_terms:
        ind = np.asarray(indicator, dtype=float)
        if ind.shape[0] != len(df):
            raise DataError(f"interaction term {name!r} length mismatch")
        X[name] = ind
        X[f"group_x_{name}"] = ind * df[smp.GROUP].to_numpy(dtype=float)
    fe_keys = [df[smp.COURT_YEAR].to_numpy()] if use_fe else None
    return X, fe_keys


def run_benchmark(sample: smp.EstimationSample,
                  spec: BenchmarkSpec | None = None, *, name: str = "") -> BenchmarkResult:
    """Release on group flag plus the selected control blocks."""
    spec = spec or BenchmarkSpec()
    df = _frame_for(sample, spec)
    group = df[smp.GROUP].to_numpy(dtype=float)
    X, fe_keys = _design_and_keys(sample, spec, df, group_columns=[("group", group)])
    fit = ols_fe(df[smp.RELEASED].to_numpy(dtype=float), X,
                 fe_keys=fe_keys, cluster_key=df[smp.COURT_YEAR].to_numpy())
    interactions = {
        c: (fit.coef(c), float(fit.se[c]))
        for c in fit.coefficients.index if c.startswith("group_x_")
    }
    return BenchmarkResult(
        name=name or "+".join(spec.control_sets) or "none",
        alpha_d=fit.coef("group"),
        se=float(fit.se["group"]),
        fit=fit,
        mean_dep=float(df[smp.RELEASED].mean()),
        n_group1=int((group == 1).sum()),
        n_group0=int((group == 0).sum()),
        spec=spec,
        interaction_estimates=interactions,
    )


@dataclass
class CrimeBenchmarkResult:
    estimates: pd.DataFrame  # category, coef, se, identified
    fit: FitResult
    mean_dep: float
    n_group1: int
    n_group0: int


def run_benchmark_by_crime(sample: smp.EstimationSample,
                           spec: BenchmarkSpec | None = None) -> CrimeBenchmarkResult:
    """One regression with group x category interactions replacing the lone
    group dummy; full controls by default.  Categories with no group-1 cases
    are flagged non-identified."""
    spec = spec or BenchmarkSpec(control_sets=COLUMN_PRESETS["full"])
    df = _frame_for(sample, spec)
    group = df[smp.GROUP].to_numpy(dtype=float)
    cats = sorted(pd.unique(df[smp.CATEGORY]))

    group_cols = []
    identified = {}
    for cat in cats:
        ind = (df[smp.CATEGORY] == cat).to_numpy(dtype=float)
        col = group * ind
        identified[cat] = bool((col != 0).any() and (ind * (1 - group) != 0).any())
        group_cols.append((f"group_x_cat_{cat}", col))

    X, fe_keys = _design_and_keys(sample, spec, df, group_columns=group_cols)
    fit = ols_fe(df[smp.RELEASED].to_numpy(dtype=float), X,
                 fe_keys=fe_keys, cluster_key=df[smp.COURT_YEAR].to_numpy())
    rows = []
    for cat in cats:
        cname = f"group_x_cat_{cat}"
        if cname in fit.coefficients.index and identified[cat]:
            rows.append((cat, fit.coef(cname), float(fit.se[cname]), True))
        else:
            rows.append((cat, np.nan, np.nan, False))
    return CrimeBenchmarkResult(
        estimates=pd.DataFrame(rows, columns=["category", "coef", "se", "identified"]),
        fit=fit,
        mean_dep=float(df[smp.RELEASED].mean()),
        n_group1=int((group == 1).sum()),
        n_group0=int((group == 0).sum()),
    )


def run_benchmark_split(sample: smp.EstimationSample, partition: dict | None = None,
                        interaction: tuple | None = None,
                        base_spec: BenchmarkSpec | None = None) -> dict:
    """Split-sample fits (one per partition cell) and/or an interaction fit.

    ``partition`` maps cell names to boolean masks over the sample; every
    cell must be non-empty.  ``interaction`` is a (name, indicator) pair fit
    on the full sample with a ``group_x_<name>`` column added.
    """
    if partition is None and interaction is None:
        raise DataError("provide a partition, an interaction, or both")
    base = base_spec or BenchmarkSpec(control_sets=COLUMN_PRESETS["full"])
    out: dict[str, BenchmarkResult] = {}
    if partition:
        for cell, mask in partition.items():
            mask = np.asarray(mask, dtype=bool)
            if not mask.any():
                raise DataError(f"empty partition cell {cell!r}")
            spec = BenchmarkSpec(control_sets=base.control_sets,
                                 sample_filter=mask,
                                 use_court_covariates_instead_of_fe=
                                 base.use_court_covariates_instead_of_fe)
            out[cell] = run_benchmark(sample, spec, name=cell)
    if interaction is not None:
        name, indicator = interaction
        spec = BenchmarkSpec(control_sets=base.control_sets,
                             interaction_terms=[(name, indicator)],
                             sample_filter=base.sample_filter,
                             use_court_covariates_instead_of_fe=
                             base.use_court_covariates_instead_of_fe)
        out[f"interaction:{name}"] = run_benchmark(sample, spec, name=f"interaction:{name}")
    return out


def experienced_judge_indicator(sample: smp.EstimationSample,
                                first_period: tuple = (2008, 2012),
                                min_cases: int = 200) -> np.ndarray:
    """Indicator for cases handled by a judge with at least ``min_cases``
    cases during the first period."""
    df = sample.df
    in_period = df[smp.YEAR].between(first_period[0], first_period[1])
    counts = df.loc[in_period].groupby(smp.JUDGE).size()
    experienced = set(counts[counts >= min_cases].index)
    return df[smp.JUDGE].isin(experienced).to_numpy(dtype=float)


def period_masks(sample: smp.EstimationSample,
                 periods=((2008, 2012), (2013, 2017))) -> dict:
    df = sample.df
    return {f"{a}-{b}": df[smp.YEAR].between(a, b).to_numpy() for a, b in periods}


def treatment_residual_variance(sample: smp.EstimationSample,
                                spec: BenchmarkSpec) -> float:
    """Variance of the group flag after partialling out the spec's controls
    (and fixed effects); feeds the exact coefficient-stability mode."""
    df = _frame_for(sample, spec)
    group = df[smp.GROUP].to_numpy(dtype=float)
    X, fe_keys = _design_and_keys(sample, spec, df, group_columns=[])
    if X.shape[1] == 0 and fe_keys is None:
        resid = group - group.mean()
    else:
        try:
            fit = ols_fe(group, X, fe_keys=fe_keys,
                         cluster_key=df[smp.COURT_YEAR].to_numpy())
            resid = fit.residuals
        except EstimationError:
            resid = group - group.mean()
    return float(np.var(resid))
