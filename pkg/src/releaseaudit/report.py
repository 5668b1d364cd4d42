"""Structured audit report: one block per analysis keyed by its table
analogue, a deterministic machine-readable key-value rendering, and a
human-readable rendering with the table layouts.

The machine text is a function of (input, config) only: keys are sorted,
floats use a fixed format, and no timestamps or paths enter the payload.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        if np.isnan(v):
            return "nan"
        return format(float(v), ".10g")
    if v is None:
        return ""
    return str(v)


@dataclass
class Block:
    key: str
    kv: dict
    human: str


@dataclass
class AuditReport:
    blocks: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    def add(self, block: Block) -> None:
        self.blocks[block.key] = block

    def add_error(self, analysis: str, message: str) -> None:
        self.errors[analysis] = message

    def machine_text(self) -> str:
        lines = []
        for k in sorted(self.metadata):
            lines.append(f"meta.{k} = {fmt(self.metadata[k])}")
        for bkey in sorted(self.blocks):
            kv = self.blocks[bkey].kv
            for k in sorted(kv):
                lines.append(f"{bkey}.{k} = {fmt(kv[k])}")
        for k in sorted(self.errors):
            lines.append(f"error.{k} = {self.errors[k]}")
        return "\n".join(lines) + "\n"

    def human_text(self) -> str:
        parts = ["Audit report", "============", ""]
        parts.append("Run metadata:")
        for k in sorted(self.metadata):
            parts.append(f"  {k}: {fmt(self.metadata[k])}")
        parts.append("")
        for bkey in sorted(self.blocks):
            parts.append(self.blocks[bkey].human.rstrip())
            parts.append("")
        if self.errors:
            parts.append("Analysis errors:")
            for k in sorted(self.errors):
                parts.append(f"  {k}: {self.errors[k]}")
            parts.append("")
        return "\n".join(parts)


def _table(df: pd.DataFrame, title: str, float_fmt: str = "{:.4f}") -> str:
    def cell(v):
        if isinstance(v, (float, np.floating)):
            return "" if np.isnan(v) else float_fmt.format(v)
        return str(v)
    body = df.map(cell) if hasattr(df, "map") else df.applymap(cell)
    return title + "\n" + "-" * len(title) + "\n" + body.to_string()


def block_describe(desc: pd.DataFrame, group_labels) -> Block:
    kv = {}
    for i, row in desc.iterrows():
        kv[f"row{i:02d}.label"] = row["statistic"]
        kv[f"row{i:02d}.{group_labels[0]}"] = row[group_labels[0]]
        kv[f"row{i:02d}.{group_labels[1]}"] = row[group_labels[1]]
    human = _table(desc.set_index("statistic"), "T1. Descriptive statistics by group")
    return Block("T1", kv, human)


def block_benchmark(results: list) -> Block:
    kv = {}
    rows = []
    for res in results:
        kv[f"{res.name}.alpha_d"] = res.alpha_d
        kv[f"{res.name}.se"] = res.se
        kv[f"{res.name}.mean_dep"] = res.mean_dep
        kv[f"{res.name}.n_group1"] = res.n_group1
        kv[f"{res.name}.n_group0"] = res.n_group0
        kv[f"{res.name}.r_squared"] = res.fit.r_squared
        kv[f"{res.name}.n_clusters"] = res.fit.n_clusters
        rows.append((res.name, res.alpha_d, res.se, res.mean_dep,
                     res.n_group1, res.n_group0, res.fit.r_squared))
    df = pd.DataFrame(rows, columns=["column", "alpha_d", "se", "mean_dep",
                                     "n_group1", "n_group0", "r2"]).set_index("column")
    return Block("T2", kv, _table(df, "T2. Benchmark regressions (release on group + controls)"))


def block_oster(grid_df: pd.DataFrame, inputs, mode: str,
                variant_note: bool = True) -> Block:
    kv = {
        "beta_uncontrolled": inputs.beta_uncontrolled,
        "beta_controlled": inputs.beta_controlled,
        "r2_uncontrolled": inputs.r2_uncontrolled,
        "r2_controlled": inputs.r2_controlled,
        "mode": mode,
    }
    for rmax, row in grid_df.iterrows():
        for delta, val in row.items():
            kv[f"beta_star.rmax_{fmt(rmax)}.delta_{fmt(delta)}"] = val
    human = _table(grid_df, "T3. Coefficient-stability bounds (rows r_max, columns delta)")
    if variant_note:
        human += ("\nNote: rows with r_max well above the controlled R-squared are "
                  "sensitive to the estimator variant (restricted vs exact mode).")
    return Block("T3", kv, human)


def block_selection(fits: dict, verdict, kpt=None, pbot_res=None) -> Block:
    kv = {}
    rows = []
    for key, f in sorted(fits.items()):
        kv[f"{key}.beta_d"] = f.beta_d
        kv[f"{key}.se"] = f.beta_d_se
        kv[f"{key}.excluded_f"] = f.excluded_f_stat
        kv[f"{key}.n_released"] = f.n_released
        kv[f"{key}.controls"] = "+".join(f.outcome_controls) or "none"
        rows.append((key, f.beta_d, f.beta_d_se, f.excluded_f_stat))
    if verdict is not None:
        kv["verdict"] = verdict.verdict
        kv["z_full"] = verdict.z_full
        for key, ratio in sorted(verdict.gap_closure.items()):
            kv[f"gap_closure.{key}"] = ratio
    if kpt is not None:
        kv["kpt.gap"] = kpt.gap
        kv["kpt.se"] = kpt.se
        kv["kpt.mean_dep"] = kpt.mean_misconduct
        rows.append(("kpt", kpt.gap, kpt.se, np.nan))
    if pbot_res is not None:
        kv["pbot.gap"] = pbot_res.diff_in_means
        kv["pbot.se"] = pbot_res.bootstrap_se
        kv["pbot.mean_dep_marginal"] = pbot_res.marginal_sample_mean_misconduct
        rows.append(("pbot", pbot_res.diff_in_means, pbot_res.bootstrap_se, np.nan))
    df = pd.DataFrame(rows, columns=["model", "beta_d", "se", "excluded_F"]).set_index("model")
    human = _table(df, "T4. Selection-corrected outcome tests (misconduct on group)")
    if verdict is not None:
        human += f"\nVerdict: {verdict.verdict} (|z| at full controls = {abs(verdict.z_full):.2f})"
    return Block("T4", kv, human)


def block_crime(res) -> Block:
    kv = {}
    for _, row in res.estimates.iterrows():
        cat = row["category"]
        kv[f"cat_{cat}.coef"] = row["coef"]
        kv[f"cat_{cat}.se"] = row["se"]
        kv[f"cat_{cat}.identified"] = bool(row["identified"])
    kv["mean_dep"] = res.mean_dep
    kv["n_group1"] = res.n_group1
    kv["n_group0"] = res.n_group0
    human = _table(res.estimates.set_index("category"),
                   "T5. Discrimination by crime category (group x category)")
    return Block("T5", kv, human)


def block_splits(results: dict) -> Block:
    kv = {}
    rows = []
    for cell, res in sorted(results.items()):
        safe = cell.replace(":", "_")
        kv[f"{safe}.alpha_d"] = res.alpha_d
        kv[f"{safe}.se"] = res.se
        kv[f"{safe}.n_group1"] = res.n_group1
        kv[f"{safe}.n_group0"] = res.n_group0
        for iname, (coef, se) in sorted(res.interaction_estimates.items()):
            kv[f"{safe}.{iname}"] = coef
            kv[f"{safe}.{iname}_se"] = se
        rows.append((cell, res.alpha_d, res.se, res.n_group1, res.n_group0))
    df = pd.DataFrame(rows, columns=["cell", "alpha_d", "se",
                                     "n_group1", "n_group0"]).set_index("cell")
    return Block("T6", kv, _table(df, "T6. Split-sample and interaction designs"))


def block_newey(fits: dict) -> Block:
    kv = {}
    rows = []
    for key, f in sorted(fits.items()):
        kv[f"{key}.beta_d"] = f.beta_d
        kv[f"{key}.se"] = f.beta_d_se
        kv[f"{key}.controls"] = "+".join(f.outcome_controls) or "none"
        rows.append((key, f.beta_d, f.beta_d_se))
    df = pd.DataFrame(rows, columns=["model", "beta_d", "se"]).set_index("model")
    return Block("TA1", kv, _table(df, "TA1. Semiparametric selection models (series corrections)"))


def block_kob(results: list) -> Block:
    kv = {}
    rows = []
    for res in results:
        tag = f"{res.outcome}_{'residualized' if res.residualized else 'raw'}"
        kv[f"{tag}.total"] = res.total_gap
        kv[f"{tag}.explained"] = res.explained
        kv[f"{tag}.unexplained"] = res.unexplained
        kv[f"{tag}.se_total"] = res.se_total
        kv[f"{tag}.se_explained"] = res.se_explained
        kv[f"{tag}.se_unexplained"] = res.se_unexplained
        rows.append((tag, res.total_gap, res.explained, res.unexplained))
    df = pd.DataFrame(rows, columns=["variant", "total", "explained",
                                     "unexplained"]).set_index("variant")
    return Block("TC1", kv, _table(df, "TC1. Gap decompositions (explained vs unexplained)"))


def block_monotonicity(res, key: str) -> Block:
    kv = {"consistency_score": res.consistency_score}
    for cell in res.table.index:
        for col in res.table.columns:
            kv[f"{cell}.{col}"] = res.table.loc[cell, col]
    title = {"TD1": "TD1. Sign stability, release outcome",
             "TD2": "TD2. Sign stability, misconduct outcome"}[key]
    human = _table(res.table, title)
    human += f"\nSign-consistency score: {res.consistency_score:.3f}"
    return Block(key, kv, human)


def block_rank_validity(res) -> Block:
    kv = {"marginal_share": res.marginal_share}
    for pred in res.table.index:
        for col in res.table.columns:
            kv[f"{pred}.{col}"] = res.table.loc[pred, col]
        kv[f"{pred}.n_cells"] = res.n_cells_by_predictor[pred]
    return Block("TD3", kv, _table(res.table, "TD3. Leave-one-out rank-correlation validity"))


def block_histogram(hist: pd.DataFrame) -> Block:
    kv = {}
    for i, row in hist.iterrows():
        kv[f"bin{i:03d}"] = (f"group={int(row['group'])};low={fmt(row['bin_low'])};"
                             f"high={fmt(row['bin_high'])};count={int(row['count'])}")
    human = _table(hist.head(20), "FD1. Propensity histogram by group (lowest bins shown)")
    return Block("FD1", kv, human)
