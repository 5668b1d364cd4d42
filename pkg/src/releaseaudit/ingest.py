"""Reading raw case records, applying sample restrictions, and constructing
derived variables (severity, criminal-record features, leave-out leniency and
attorney quality, fixed-effect keys).

Restrictions run in a fixed order and every dropped row is charged to exactly
one rule, so the exclusion ledger counts sum to input minus output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import DataError
from . import sample as smp

RECORD_COLUMNS = [
    "case_id", "defendant_id", "judge_id", "attorney_id", "court_id",
    "hearing_date", "case_end_date", "crime_type_code", "crime_category",
    "group_flag", "summons_flag", "juvenile_flag", "private_attorney_flag",
    "released", "pretrial_detention_days", "nonappearance",
    "pretrial_recidivism", "convicted",
]

DATE_COLUMNS = ["hearing_date", "case_end_date"]

HISTORY_FEATURES = [
    "prev_case", "n_prev_cases", "prev_misconduct", "prev_conviction",
    "severity_prev_case",
]


@dataclass
class RestrictionRules:
    """Knobs for the sample restrictions, in their fixed application order."""

    max_case_days: int = 730
    min_detention_probability: float = 0.05
    min_judge_cases: int = 10
    min_attorney_prior_cases: int = 10
    history_start_date: str | None = None


@dataclass
class BuildResult:
    sample: smp.EstimationSample
    ledger: dict = field(default_factory=dict)
    severity: dict = field(default_factory=dict)


def read_records_csv(path) -> pd.DataFrame:
    """Comma-separated records with a header row, ISO-8601 dates, and empty
    fields for missing values.  Unknown extra columns ride along."""
    df = pd.read_csv(path)
    missing = [c for c in RECORD_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"record file missing columns: {missing}")
    for c in DATE_COLUMNS:
        df[c] = pd.to_datetime(df[c], format="ISO8601")
    return df


def write_records_csv(records: pd.DataFrame, path) -> None:
    out = records.copy()
    for c in DATE_COLUMNS:
        out[c] = pd.to_datetime(out[c]).dt.strftime("%Y-%m-%d")
    if "year" in out.columns:
        out = out.drop(columns=["year"])
    out.to_csv(path, index=False)


def compute_severity(records: pd.DataFrame) -> dict:
    """Detention share per crime type, computed on the cleaned pre-restriction
    set so both the deduplication and the minimum-detention-rate rule can use
    it.  Types with zero cases are absent; lookups must fail loudly."""
    grouped = records.groupby("crime_type_code")["released"]
    out = {}
    for code, vals in grouped:
        out[code] = float((1 - vals).mean())
    return out


def severity_of(severity: dict, codes) -> np.ndarray:
    missing = sorted(set(codes) - set(severity))
    if missing:
        raise DataError(f"crime types without severity: {missing}")
    return np.asarray([severity[c] for c in codes], dtype=float)


def compute_history(records: pd.DataFrame,
                    history_start_date: str | None = None) -> pd.DataFrame:
    """Criminal-record features from each defendant's strictly earlier cases.

    A past case counts as misconduct when it has recorded nonappearance or
    when any other case of the same defendant starts inside the past case's
    [start, end] window (a within-window re-arrest).  Defendants with no
    earlier cases get zeros.  ``history_start_date`` left-censors which past
    cases are visible.
    """
    if records["case_id"].duplicated().any():
        raise DataError("duplicate case_id values in records")
    keyed = records[["case_id", "defendant_id"]].copy()
    if keyed.duplicated().any():
        raise DataError("duplicate (defendant, case) keys in records")

    cutoff = pd.Timestamp(history_start_date) if history_start_date else None
    cols = ["case_id", "defendant_id", "hearing_date", "case_end_date",
            "crime_type_code", "nonappearance", "convicted"]
    df = records[cols].sort_values(["defendant_id", "hearing_date", "case_id"])

    feats = {c: np.zeros(len(df)) for c in HISTORY_FEATURES}
    severity = compute_severity(records)
    row_pos = 0
    for _, grp in df.groupby("defendant_id", sort=False):
        h = grp["hearing_date"].to_numpy()
        e = grp["case_end_date"].to_numpy()
        nonapp = grp["nonappearance"].to_numpy(dtype=float)
        conv = grp["convicted"].to_numpy(dtype=float)
        codes = grp["crime_type_code"].to_numpy()
        m = len(grp)
        for i in range(m):
            visible = [j for j in range(m)
                       if h[j] < h[i] and (cutoff is None or h[j] >= np.datetime64(cutoff))]
            if visible:
                feats["prev_case"][row_pos] = 1.0
                feats["n_prev_cases"][row_pos] = len(visible)
                last = max(visible, key=lambda j: (h[j], grp["case_id"].iloc[j]))
                feats["severity_prev_case"][row_pos] = severity[codes[last]]
                feats["prev_conviction"][row_pos] = float(any(conv[j] == 1 for j in visible))
                mis = False
                for j in visible:
                    if nonapp[j] == 1:
                        mis = True
                        break
                    rearrest = any(k != j and h[j] < h[k] <= e[j] for k in range(m))
                    if rearrest:
                        mis = True
                        break
                feats["prev_misconduct"][row_pos] = float(mis)
            row_pos += 1

    out = pd.DataFrame(feats)
    out["case_id"] = df["case_id"].to_numpy()
    return out.set_index("case_id").loc[records["case_id"]].reset_index()


def leaveout_rates(df: pd.DataFrame) -> pd.DataFrame:
    """Judge leniency and attorney quality as leave-out means of release
    residualized against court-by-year fixed effects, squares appended."""
    rel = df[smp.RELEASED].to_numpy(dtype=float)
    cy_mean = df.groupby(smp.COURT_YEAR)[smp.RELEASED].transform("mean").to_numpy()
    resid = rel - cy_mean

    out = {}
    for key, name in ((smp.JUDGE, "judge_leniency"), (smp.ATTORNEY, "attorney_quality")):
        codes, uniq = pd.factorize(df[key].to_numpy())
        counts = np.bincount(codes, minlength=len(uniq)).astype(float)
        if counts.min() < 2:
            which = uniq[int(np.argmin(counts))]
            raise DataError(f"{key} {which!r} has fewer than 2 cases; "
                            "leave-out mean undefined")
        sums = np.bincount(codes, weights=resid, minlength=len(uniq))
        loo = (sums[codes] - resid) / (counts[codes] - 1.0)
        out[name] = loo
        out[f"{name}_sq"] = loo * loo
    return pd.DataFrame(out, index=df.index)


def _category_from_records(records: pd.DataFrame) -> pd.Series:
    return records["crime_category"]


def build_sample(records: pd.DataFrame,
                 rules: RestrictionRules | None = None) -> BuildResult:
    """Apply the sample restrictions in order and construct the estimation
    sample.  Returns the sample, a per-rule exclusion ledger, and the
    severity map used by the restrictions."""
    rules = rules or RestrictionRules()
    if records.empty:
        raise DataError("no input records")
    df = records.copy()
    df["hearing_date"] = pd.to_datetime(df["hearing_date"])
    df["case_end_date"] = pd.to_datetime(df["case_end_date"])
    ledger: dict[str, int] = {}

    def apply_rule(name: str, keep_mask) -> None:
        nonlocal df
        keep_mask = np.asarray(keep_mask, dtype=bool)
        ledger[name] = int((~keep_mask).sum())
        df = df.loc[keep_mask]
        if df.empty:
            raise DataError(f"sample exhausted by restriction {name!r}")

    # basic cleaning
    apply_rule("date_consistency", df["case_end_date"] >= df["hearing_date"])
    case_days = (df["case_end_date"] - df["hearing_date"]).dt.days
    apply_rule("detention_longer_than_case",
               df["pretrial_detention_days"].fillna(0) <= case_days)
    apply_rule("missing_group_flag", df["group_flag"].notna())

    # severity on the cleaned, pre-restriction set
    severity = compute_severity(df)

    apply_rule("summons", df["summons_flag"] != 1)
    apply_rule("juvenile", df["juvenile_flag"] != 1)
    apply_rule("exclusive_private_attorney", df["private_attorney_flag"] != 1)
    case_days = (df["case_end_date"] - df["hearing_date"]).dt.days
    apply_rule("case_longer_than_two_years", case_days <= rules.max_case_days)

    # most-severe-crime deduplication within defendant x hearing date;
    # ties broken by lowest crime type code
    sev = severity_of(severity, df["crime_type_code"])
    df = df.assign(_sev=sev)
    order = df.sort_values(
        ["defendant_id", "hearing_date", "_sev", "crime_type_code"],
        ascending=[True, True, False, True], kind="mergesort")
    keep_ids = order.drop_duplicates(["defendant_id", "hearing_date"], keep="first")["case_id"]
    apply_rule("most_severe_crime_dedup", df["case_id"].isin(set(keep_ids)))

    apply_rule("missing_judge", df["judge_id"].notna())
    apply_rule("low_detention_crime_types",
               df["_sev"] >= rules.min_detention_probability)

    counts = df.groupby("judge_id")["case_id"].transform("size")
    apply_rule("judges_below_min_cases", counts >= rules.min_judge_cases)

    # attorney must have handled enough strictly earlier cases
    att = df[["attorney_id", "hearing_date", "case_id"]].sort_values(
        ["attorney_id", "hearing_date", "case_id"], kind="mergesort")
    prior = att.groupby("attorney_id").cumcount().to_numpy()
    prior_by_case = pd.Series(prior, index=att["case_id"]).loc[df["case_id"]].to_numpy()
    apply_rule("attorneys_below_min_prior_cases",
               prior_by_case >= rules.min_attorney_prior_cases)

    df = df.reset_index(drop=True)
    history = compute_history(df, rules.history_start_date)

    frame = pd.DataFrame({
        smp.RELEASED: df["released"].to_numpy(dtype=np.int64),
        smp.GROUP: df["group_flag"].to_numpy(dtype=np.int64),
        smp.YEAR: df["hearing_date"].dt.year.to_numpy(),
        smp.JUDGE: df["judge_id"].to_numpy(),
        smp.ATTORNEY: df["attorney_id"].to_numpy(),
        smp.COURT: df["court_id"].to_numpy(),
        smp.CATEGORY: _category_from_records(df).to_numpy(),
    })
    rel = frame[smp.RELEASED].to_numpy()
    nonapp = df["nonappearance"].to_numpy(dtype=float)
    recid = df["pretrial_recidivism"].to_numpy(dtype=float)
    misconduct = np.where((nonapp == 1) | (recid == 1), 1.0, 0.0)
    frame[smp.MISCONDUCT] = np.where(rel == 1, misconduct, np.nan)
    frame[smp.COURT_YEAR] = ("C" + df["court_id"].astype(str)
                             + "-Y" + df["hearing_date"].dt.year.astype(str))

    controls = []
    for c in HISTORY_FEATURES:
        frame[c] = history[c].to_numpy()
        controls.append(c)
    frame["severity_current"] = df["_sev"].to_numpy()
    controls.append("severity_current")
    dummies, _ = smp.category_dummy_frame(frame[smp.CATEGORY])
    for c in dummies.columns:
        frame[c] = dummies[c].to_numpy()
        controls.append(c)

    lo = leaveout_rates(frame)
    for c in smp.JUDGE_ATTORNEY_CONTROLS:
        frame[c] = lo[c]
    frame = smp.attach_court_year_covariates(frame, severity_col="severity_current")

    # optional passthrough covariates and partition variables
    extra_partitions = []
    for c in df.columns:
        if c.startswith("obs_"):
            frame[c] = df[c].to_numpy(dtype=float)
            controls.append(c)
        elif c.startswith("part_"):
            frame[c] = df[c].to_numpy()
            extra_partitions.append(c)

    sample = smp.EstimationSample(df=frame, individual_controls=controls,
                                  extra_partitions=extra_partitions)
    return BuildResult(sample=sample, ledger=ledger, severity=severity)


def describe_sample(sample: smp.EstimationSample,
                    group_labels: tuple[str, str] = ("group0", "group1")) -> pd.DataFrame:
    """Descriptive table by group, mirroring the released/outcome/individual/
    court-characteristics layout."""
    df = sample.df
    rows = []

    def stat(label, series, released_only=False):
        vals = []
        for g in (0, 1):
            mask = df[smp.GROUP] == g
            if released_only:
                mask &= df[smp.RELEASED] == 1
            sub = series[mask]
            vals.append(float(sub.mean()) if len(sub) else np.nan)
        rows.append((label, *vals))

    stat("Released", df[smp.RELEASED])
    stat("Pretrial misconduct", df[smp.MISCONDUCT], released_only=True)
    for col, label in (("prev_case", "At least one previous case"),
                       ("prev_misconduct", "At least one previous pretrial misconduct"),
                       ("prev_conviction", "At least one previous conviction"),
                       ("n_prev_cases", "No. of previous cases"),
                       ("severity_prev_case", "Severity previous case"),
                       ("severity_current", "Severity current case")):
        if col in df.columns:
            stat(label, df[col])
    for col, label in (("cy_avg_severity", "Average severity (year/court)"),
                       ("cy_n_cases", "No. of cases (year/court)"),
                       ("cy_n_judges", "No. of judges (year/court)")):
        if col in df.columns:
            stat(label, df[col])
    for rel_val, label in ((1, "Observations (released)"),
                           (0, "Observations (nonreleased)")):
        counts = [int(((df[smp.RELEASED] == rel_val) & (df[smp.GROUP] == g)).sum())
                  for g in (0, 1)]
        rows.append((label, *counts))
    out = pd.DataFrame(rows, columns=["statistic", group_labels[0], group_labels[1]])
    return out
