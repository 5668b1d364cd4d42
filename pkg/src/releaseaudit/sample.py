"""Rectangular analysis dataset shared by every estimator.

The frame carries one row per retained case with fixed column names for
outcomes, keys, and ids; the lists name which columns belong to each control
block so estimators can assemble designs without guessing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import DataError

# canonical column names
RELEASED = "released"
MISCONDUCT = "misconduct"
GROUP = "group"
COURT_YEAR = "court_year"
YEAR = "year"
JUDGE = "judge_id"
ATTORNEY = "attorney_id"
COURT = "court_id"
CATEGORY = "crime_category"

JUDGE_ATTORNEY_CONTROLS = [
    "judge_leniency", "judge_leniency_sq", "attorney_quality", "attorney_quality_sq",
]
# the three time-varying court covariates used in place of court-by-year
# fixed effects inside nonlinear first stages
COURT_COVARIATES = ["cy_n_judges", "cy_release_rate", "cy_n_cases"]
COURT_COVARIATES_EXTRA = ["cy_avg_severity"]

REQUIRED = [RELEASED, MISCONDUCT, GROUP, COURT_YEAR, YEAR, JUDGE, ATTORNEY, COURT, CATEGORY]


@dataclass
class EstimationSample:
    df: pd.DataFrame
    individual_controls: list[str]
    judge_attorney_controls: list[str] = field(
        default_factory=lambda: list(JUDGE_ATTORNEY_CONTROLS))
    court_covariates: list[str] = field(default_factory=lambda: list(COURT_COVARIATES))
    extra_partitions: list[str] = field(default_factory=list)

    def __post_init__(self):
        missing = [c for c in REQUIRED if c not in self.df.columns]
        if missing:
            raise DataError(f"sample frame missing columns: {missing}")
        regressors = (list(self.individual_controls) + list(self.judge_attorney_controls)
                      + list(self.court_covariates) + [GROUP])
        bad = [c for c in regressors if self.df[c].isna().any()]
        if bad:
            raise DataError(f"missing values in regressor columns: {bad}")
        rel = self.df[RELEASED].to_numpy()
        mc_missing = self.df[MISCONDUCT].isna().to_numpy()
        if not np.array_equal(mc_missing, rel == 0):
            raise DataError("misconduct must be missing exactly on detained rows")

    @property
    def n(self) -> int:
        return len(self.df)

    @property
    def category_dummies(self) -> list[str]:
        return [c for c in self.individual_controls if c.startswith("cat_")]

    def released(self) -> "EstimationSample":
        return self.subset(self.df[RELEASED] == 1)

    def subset(self, mask) -> "EstimationSample":
        return EstimationSample(
            df=self.df.loc[np.asarray(mask)].reset_index(drop=True),
            individual_controls=list(self.individual_controls),
            judge_attorney_controls=list(self.judge_attorney_controls),
            court_covariates=list(self.court_covariates),
            extra_partitions=list(self.extra_partitions),
        )

    def design(self, columns, *, intercept: bool = True,
               frame: pd.DataFrame | None = None) -> pd.DataFrame:
        """Assemble a named design matrix from sample columns."""
        df = self.df if frame is None else frame
        out = {}
        if intercept:
            out["const"] = np.ones(len(df))
        for c in columns:
            out[c] = df[c].to_numpy(dtype=float)
        return pd.DataFrame(out)

    def control_columns(self, blocks) -> list[str]:
        """Expand block names {'individual','judge_attorney','court_covariates'}."""
        cols: list[str] = []
        for b in blocks:
            if b == "individual":
                cols.extend(self.individual_controls)
            elif b == "judge_attorney":
                cols.extend(self.judge_attorney_controls)
            elif b == "court_covariates":
                cols.extend(self.court_covariates)
            else:
                raise DataError(f"unknown control block: {b!r}")
        return cols


def attach_court_year_covariates(df: pd.DataFrame,
                                 severity_col: str | None = None) -> pd.DataFrame:
    """Append per-(court, year) covariates: distinct judges, mean release
    rate, prosecution count, and mean case severity when available."""
    g = df.groupby(COURT_YEAR)
    df = df.copy()
    df["cy_n_judges"] = g[JUDGE].transform("nunique").astype(float)
    df["cy_release_rate"] = g[RELEASED].transform("mean")
    df["cy_n_cases"] = g[RELEASED].transform("size").astype(float)
    if severity_col is not None and severity_col in df.columns:
        df["cy_avg_severity"] = g[severity_col].transform("mean")
    return df


def category_dummy_frame(categories: pd.Series, *, drop_first: bool = True):
    """Deterministic 0/1 indicators per crime category, base level dropped."""
    levels = sorted(pd.unique(categories))
    use = levels[1:] if drop_first and len(levels) > 1 else levels
    cols = {}
    for lev in use:
        cols[f"cat_{lev}"] = (categories == lev).astype(float).to_numpy()
    return pd.DataFrame(cols, index=categories.index), levels
