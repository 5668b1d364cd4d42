"""Synthetic case generator with plantable discrimination.

Cases follow a threshold-crossing release model: each case carries a latent
misconduct probability ``p`` derived from observed and unobserved covariates
through a probit (or logistic) index, and is released when ``p`` does not
exceed the assigned judge's effective threshold.  Group-specific threshold
shifts plant taste-based discrimination; group-specific belief offsets plant
stereotype bias; correlating the group flag with unobserved covariates plants
statistical discrimination; court-assignment skew routes group-1 cases toward
strict courts without touching any threshold.

Randomness is organized as one counter-based (Philox) stream per field with
the case index as the counter position, so draws for disjoint case ranges can
be produced independently and concatenate to exactly the sequential output.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import pandas as pd
from scipy import special

from .errors import ConfigError
from . import sample as smp

BASE_YEAR = 2008
CASE_LENGTH_DAYS = 60
DETENTION_DAYS = 30

# field ids for the per-field RNG streams
_F_GROUP, _F_COURT, _F_JUDGE, _F_ATTORNEY, _F_YEAR, _F_CATEGORY = 0, 1, 2, 3, 4, 5
_F_YSTAR, _F_MISCONDUCT_SPLIT, _F_HEARING_DAY, _F_CONVICTED = 6, 7, 8, 9
_F_OBS_BASE, _F_UNOBS_BASE = 100, 200

_PURPOSE_GENERATE = 0
_PURPOSE_MC = 1


@dataclass(frozen=True)
class DGPSpec:
    """Full parameterization of the threshold-crossing release model."""

    n_cases: int
    n_judges: int
    n_courts: int
    n_years: int
    share_group1: float
    coef_obs: tuple
    coef_unobs: tuple
    corr_group_unobs: float
    threshold_base: float
    threshold_gap_group1: float
    belief_bias_group1: float
    court_assignment_skew: float
    seed: int
    link: str = "probit"
    n_crime_categories: int = 1
    threshold_gap_by_category: tuple | None = None
    court_strictness_spread: float = 0.0
    judge_threshold_spread: float = 0.0
    obs_dist: str = "normal"
    n_attorneys: int | None = None

    def validate(self) -> None:
        if self.n_cases < 1:
            raise ConfigError("n_cases must be >= 1")
        if not (1 <= self.n_courts <= self.n_judges):
            raise ConfigError("need 1 <= n_courts <= n_judges")
        if self.n_years < 1:
            raise ConfigError("n_years must be >= 1")
        for name in ("share_group1", "threshold_base", "court_assignment_skew"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if not -1.0 <= self.corr_group_unobs <= 1.0:
            raise ConfigError("corr_group_unobs must lie in [-1, 1]")
        if self.link not in ("probit", "logit"):
            raise ConfigError(f"unknown link {self.link!r}")
        if self.obs_dist not in ("normal", "binary"):
            raise ConfigError(f"unknown obs_dist {self.obs_dist!r}")
        if self.n_crime_categories < 1:
            raise ConfigError("n_crime_categories must be >= 1")
        gaps = self.category_gaps()
        if len(gaps) != self.n_crime_categories:
            raise ConfigError("threshold_gap_by_category length must match n_crime_categories")
        if len(self.coef_obs) > 90 or len(self.coef_unobs) > 90:
            raise ConfigError("at most 90 observed/unobserved covariate columns supported")
        # clamp-free rejection: every judge x group x category effective
        # threshold must already lie inside [0, 1]
        t_judge = self.judge_thresholds()
        for j, t in enumerate(t_judge):
            for k, gap in enumerate(gaps):
                for ind, eff in ((0, t), (1, t + gap - self.belief_bias_group1)):
                    if not 0.0 <= eff <= 1.0:
                        raise ConfigError(
                            f"effective threshold {eff:.4f} outside [0, 1] for "
                            f"judge {j}, group {ind}, category {k}")

    def category_gaps(self) -> np.ndarray:
        if self.threshold_gap_by_category is None:
            return np.full(self.n_crime_categories, float(self.threshold_gap_group1))
        return np.asarray(self.threshold_gap_by_category, dtype=float)

    def court_of_judge(self) -> np.ndarray:
        edges = (np.arange(self.n_courts + 1) * self.n_judges) // self.n_courts
        court = np.empty(self.n_judges, dtype=np.int64)
        for c in range(self.n_courts):
            court[edges[c]:edges[c + 1]] = c
        return court

    def judge_thresholds(self) -> np.ndarray:
        """Base threshold plus evenly spaced court and judge offsets (higher
        court index = stricter court = lower threshold)."""
        C, J = self.n_courts, self.n_judges
        if C > 1:
            court_off = self.court_strictness_spread * (1.0 - 2.0 * np.arange(C) / (C - 1))
        else:
            court_off = np.zeros(1)
        court = self.court_of_judge()
        t = np.full(J, self.threshold_base) + court_off[court]
        for c in range(C):
            members = np.flatnonzero(court == c)
            m = members.shape[0]
            if m > 1:
                t[members] += self.judge_threshold_spread * (
                    1.0 - 2.0 * np.arange(m) / (m - 1))
        return t

    def court_weights_group1(self) -> np.ndarray:
        """Court-assignment distribution for group-1 cases: a (1 - skew)
        uniform mixture with a ramp that rises toward strict courts."""
        C = self.n_courts
        ramp = 2.0 * (np.arange(C) + 1.0) / (C * (C + 1.0))
        return (1.0 - self.court_assignment_skew) / C + self.court_assignment_skew * ramp


@dataclass
class CaseDataset:
    """Generated records plus the latent draws kept only for oracle use."""

    records: pd.DataFrame
    latent: pd.DataFrame
    spec: DGPSpec


def _uniforms(seed: int, purpose: int, field_id: int, start: int, stop: int) -> np.ndarray:
    """Doubles at counter positions [start, stop) of one named stream.

    Philox advances its counter in blocks of four 64-bit outputs, so we seek
    to ``start // 4`` blocks and discard ``start % 4`` leading draws; each
    double consumes exactly one output word, keeping positions stable.
    """
    bitgen = np.random.Philox(
        seed=np.random.SeedSequence(entropy=(int(seed), int(purpose), int(field_id))))
    skip = start % 4
    if start - skip:
        bitgen.advance((start - skip) // 4)
    vals = np.random.Generator(bitgen).random(stop - start + skip)
    return vals[skip:]


def _standard_normals(seed, purpose, field_id, start, stop) -> np.ndarray:
    # inverse-CDF transform keeps one stream word per value (the ziggurat
    # would consume a variable number and break counter alignment)
    u = _uniforms(seed, purpose, field_id, start, stop)
    return special.ndtri(np.clip(u, 1e-300, 1 - 1e-16))


def _choice(u: np.ndarray, n: int) -> np.ndarray:
    return np.minimum((u * n).astype(np.int64), n - 1)


def _weighted_choice(u: np.ndarray, weights: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, u, side="right").astype(np.int64)


def _index_block(spec: DGPSpec, purpose: int, start: int, stop: int) -> dict:
    """All raw per-case draws for case indices [start, stop)."""
    s = spec.seed
    group = (_uniforms(s, purpose, _F_GROUP, start, stop) < spec.share_group1).astype(np.int64)

    u_court = _uniforms(s, purpose, _F_COURT, start, stop)
    court = np.where(
        group == 1,
        _weighted_choice(u_court, spec.court_weights_group1()),
        _choice(u_court, spec.n_courts),
    )

    edges = (np.arange(spec.n_courts + 1) * spec.n_judges) // spec.n_courts
    lo, hi = edges[court], edges[court + 1]
    judge = lo + np.minimum(
        (_uniforms(s, purpose, _F_JUDGE, start, stop) * (hi - lo)).astype(np.int64),
        hi - lo - 1)

    n_att = spec.n_attorneys if spec.n_attorneys is not None else spec.n_judges
    att_edges = (np.arange(spec.n_courts + 1) * n_att) // spec.n_courts
    alo, ahi = att_edges[court], att_edges[court + 1]
    attorney = alo + np.minimum(
        (_uniforms(s, purpose, _F_ATTORNEY, start, stop) * (ahi - alo)).astype(np.int64),
        ahi - alo - 1)

    year = BASE_YEAR + _choice(_uniforms(s, purpose, _F_YEAR, start, stop), spec.n_years)
    category = _choice(_uniforms(s, purpose, _F_CATEGORY, start, stop),
                       spec.n_crime_categories)

    n_obs_cols = len(spec.coef_obs)
    n_unobs_cols = len(spec.coef_unobs)
    x_obs = np.empty((stop - start, n_obs_cols))
    for jcol in range(n_obs_cols):
        if spec.obs_dist == "binary":
            x_obs[:, jcol] = (
                _uniforms(s, purpose, _F_OBS_BASE + jcol, start, stop) < 0.5).astype(float)
        else:
            x_obs[:, jcol] = _standard_normals(s, purpose, _F_OBS_BASE + jcol, start, stop)

    rho = spec.corr_group_unobs
    pi = spec.share_group1
    x_unobs = np.empty((stop - start, n_unobs_cols))
    for jcol in range(n_unobs_cols):
        eps = _standard_normals(s, purpose, _F_UNOBS_BASE + jcol, start, stop)
        if rho != 0.0:
            sd = np.sqrt(pi * (1.0 - pi))
            std_group = (group - pi) / sd if sd > 0 else np.zeros_like(eps)
            x_unobs[:, jcol] = rho * std_group + np.sqrt(1.0 - rho * rho) * eps
        else:
            x_unobs[:, jcol] = eps

    index = x_obs @ np.asarray(spec.coef_obs, dtype=float) if n_obs_cols else 0.0
    index = index + (x_unobs @ np.asarray(spec.coef_unobs, dtype=float)
                     if n_unobs_cols else 0.0)
    index = np.broadcast_to(np.asarray(index, dtype=float), (stop - start,)).copy()
    p = special.ndtr(index) if spec.link == "probit" else 1.0 / (1.0 + np.exp(-index))

    t_judge = spec.judge_thresholds()
    gaps = spec.category_gaps()
    tau = t_judge[judge] + (gaps[category] - spec.belief_bias_group1) * group
    released = (p <= tau).astype(np.int64)
    y_star = (_uniforms(s, purpose, _F_YSTAR, start, stop) < p).astype(np.int64)

    return {
        "group": group, "court": court, "judge": judge, "attorney": attorney,
        "year": year, "category": category, "x_obs": x_obs, "x_unobs": x_unobs,
        "p": p, "released": released, "y_star": y_star,
        "u_split": _uniforms(s, purpose, _F_MISCONDUCT_SPLIT, start, stop),
        "u_day": _uniforms(s, purpose, _F_HEARING_DAY, start, stop),
        "u_convicted": _uniforms(s, purpose, _F_CONVICTED, start, stop),
    }


def generate(spec: DGPSpec, *, ranges=None) -> CaseDataset:
    """Generate a CaseDataset; equal spec + seed gives identical output.

    ``ranges`` optionally lists disjoint, ordered (start, stop) index pairs
    whose blocks are generated independently and concatenated; the result is
    identical to the default single range ``[(0, n_cases)]``.
    """
    spec.validate()
    if ranges is None:
        ranges = [(0, spec.n_cases)]
    blocks = [_index_block(spec, _PURPOSE_GENERATE, a, b) for a, b in ranges]

    def cat(name):
        return np.concatenate([blk[name] for blk in blocks]) if len(blocks) > 1 \
            else blocks[0][name]

    def catm(name):
        return np.vstack([blk[name] for blk in blocks]) if len(blocks) > 1 \
            else blocks[0][name]

    n = sum(b - a for a, b in ranges)
    idx = np.concatenate([np.arange(a, b) for a, b in ranges])
    group, court, judge = cat("group"), cat("court"), cat("judge")
    attorney, year, category = cat("attorney"), cat("year"), cat("category")
    p, released, y_star = cat("p"), cat("released"), cat("y_star")
    u_split, u_day, u_conv = cat("u_split"), cat("u_day"), cat("u_convicted")
    x_obs, x_unobs = catm("x_obs"), catm("x_unobs")

    misconduct = np.where(released == 1, y_star, np.nan).astype(float)
    nonapp = np.where(misconduct == 1, (u_split < 0.5).astype(float), 0.0)
    recid = np.where(misconduct == 1, (u_split >= 0.5).astype(float), 0.0)
    nonapp = np.where(released == 1, nonapp, np.nan)
    recid = np.where(released == 1, recid, np.nan)

    hearing = (pd.to_datetime(dict(year=year, month=1, day=1))
               + pd.to_timedelta((u_day * 360).astype(int), unit="D"))
    case_end = hearing + pd.Timedelta(days=CASE_LENGTH_DAYS)

    records = pd.DataFrame({
        "case_id": idx,
        "defendant_id": 1_000_000 + idx,
        "judge_id": judge,
        "attorney_id": attorney,
        "court_id": court,
        "hearing_date": hearing,
        "case_end_date": case_end,
        "crime_type_code": category,
        "crime_category": category,
        "group_flag": group,
        "summons_flag": 0,
        "juvenile_flag": 0,
        "private_attorney_flag": 0,
        "released": released,
        "pretrial_detention_days": np.where(released == 1, 0, DETENTION_DAYS),
        "nonappearance": nonapp,
        "pretrial_recidivism": recid,
        "convicted": (u_conv < 0.4).astype(np.int64),
        "year": year,
    })
    for jcol in range(x_obs.shape[1]):
        records[f"obs_{jcol}"] = x_obs[:, jcol]
    latent = pd.DataFrame({"p": p, "y_star": y_star})
    for jcol in range(x_unobs.shape[1]):
        latent[f"unobs_{jcol}"] = x_unobs[:, jcol]
    return CaseDataset(records=records, latent=latent, spec=spec)


def true_discrimination(spec: DGPSpec, n_draws: int) -> tuple[float, float]:
    """Monte Carlo value of the planted discrimination measure.

    Draws population cells ``(Z, judge, Y*)`` and flips only the group flag,
    holding the cell fixed; returns the mean counterfactual release gap
    (group 1 minus group 0) and its simulation standard error.
    """
    spec.validate()
    if n_draws < 10_000:
        raise ConfigError("true_discrimination requires n_draws >= 10**4")
    blk = _index_block(spec, _PURPOSE_MC, 0, n_draws)
    t_judge = spec.judge_thresholds()
    gaps = spec.category_gaps()
    tau0 = t_judge[blk["judge"]]
    tau1 = tau0 + gaps[blk["category"]] - spec.belief_bias_group1
    d = (blk["p"] <= tau1).astype(float) - (blk["p"] <= tau0).astype(float)
    return float(d.mean()), float(d.std(ddof=1) / np.sqrt(n_draws))


def sample_from_synthetic(dataset: CaseDataset) -> smp.EstimationSample:
    """Build an estimation sample directly from generated records.

    The true observed covariates serve as the individual controls (plus crime
    category indicators when more than one category was generated); judge and
    attorney leave-out leniency measures are computed from the realized
    release outcomes exactly as for ingested data.
    """
    from .ingest import leaveout_rates

    rec = dataset.records
    df = pd.DataFrame({
        smp.RELEASED: rec["released"].to_numpy(),
        smp.MISCONDUCT: np.where(rec["released"].to_numpy() == 1,
                                 dataset.latent["y_star"].to_numpy(), np.nan),
        smp.GROUP: rec["group_flag"].to_numpy(),
        smp.YEAR: rec["year"].to_numpy(),
        smp.JUDGE: rec["judge_id"].to_numpy(),
        smp.ATTORNEY: rec["attorney_id"].to_numpy(),
        smp.COURT: rec["court_id"].to_numpy(),
        smp.CATEGORY: rec["crime_category"].to_numpy(),
    })
    df[smp.COURT_YEAR] = ("C" + rec["court_id"].astype(str)
                          + "-Y" + rec["year"].astype(str))

    controls = []
    obs_cols = [c for c in rec.columns if c.startswith("obs_")]
    for c in obs_cols:
        df[c] = rec[c].to_numpy()
        controls.append(c)
    if dataset.spec.n_crime_categories > 1:
        dummies, _ = smp.category_dummy_frame(df[smp.CATEGORY])
        for c in dummies.columns:
            df[c] = dummies[c].to_numpy()
            controls.append(c)
        # realized detention share per category, kept for ranking exercises
        # (not a control: it is spanned by the category indicators)
        detained = 1.0 - df.groupby(smp.CATEGORY)[smp.RELEASED].transform("mean")
        df["severity_current"] = detained

    lo = leaveout_rates(df)
    for c in smp.JUDGE_ATTORNEY_CONTROLS:
        df[c] = lo[c]
    severity_col = "severity_current" if "severity_current" in df.columns else None
    df = smp.attach_court_year_covariates(df, severity_col=severity_col)
    return smp.EstimationSample(df=df, individual_controls=controls)


# --- flat key/value serialization of the spec ------------------------------

def spec_to_mapping(spec: DGPSpec) -> dict:
    out = {}
    for f in fields(spec):
        v = getattr(spec, f.name)
        if isinstance(v, tuple):
            v = ", ".join(format(x, ".17g") for x in v)
        elif v is None:
            v = ""
        out[f.name] = str(v)
    return out


_INT_FIELDS = {"n_cases", "n_judges", "n_courts", "n_years", "seed",
               "n_crime_categories"}
_FLOAT_FIELDS = {"share_group1", "corr_group_unobs", "threshold_base",
                 "threshold_gap_group1", "belief_bias_group1",
                 "court_assignment_skew", "court_strictness_spread",
                 "judge_threshold_spread"}
_TUPLE_FIELDS = {"coef_obs", "coef_unobs", "threshold_gap_by_category"}


def spec_from_mapping(mapping: dict) -> DGPSpec:
    known = {f.name for f in fields(DGPSpec)}
    unknown = set(mapping) - known
    if unknown:
        raise ConfigError(f"unknown dgp keys: {sorted(unknown)}")
    kwargs = {}
    for key, raw in mapping.items():
        raw = raw.strip() if isinstance(raw, str) else raw
        if key in _INT_FIELDS:
            kwargs[key] = int(raw)
        elif key in _FLOAT_FIELDS:
            kwargs[key] = float(raw)
        elif key in _TUPLE_FIELDS:
            if raw in ("", None):
                kwargs[key] = None if key == "threshold_gap_by_category" else ()
            else:
                kwargs[key] = tuple(float(tok) for tok in str(raw).split(","))
        elif key == "n_attorneys":
            kwargs[key] = None if raw in ("", "None", None) else int(raw)
        else:
            kwargs[key] = raw
    try:
        spec = DGPSpec(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"incomplete dgp specification: {exc}") from exc
    spec.validate()
    return spec
