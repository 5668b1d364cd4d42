"""Batch entry point.

``audit run <config>`` executes the configured analyses over ingested
records or a simulated dataset and writes the machine- and human-readable
reports; ``audit simulate <config>`` only generates data; ``audit validate
<config>`` parses the config and exits.

Config files are INI-style with strict key checking; any CLI ``--set
section.key=value`` overrides the file, which overrides defaults.  Exit
codes: 2 configuration error, 3 data error, 4 estimation error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, benchmark as bench, ingest, kob as kobmod, oster
from . import outcome as outc, report as rep, sample as smp, selection as sel
from . import dgp as dgpmod
from .errors import AuditError, ConfigError, DataError, EstimationError

ANALYSES = ("simulate", "describe", "benchmark", "oster", "selection",
            "kob", "pbot")

_KNOWN_KEYS = {
    "run": {"analyses", "output_dir", "seed", "group_labels", "threads"},
    "data": {"input_path", "history_start_date", "max_case_days",
             "min_detention_probability", "min_judge_cases",
             "min_attorney_prior_cases"},
    "dgp": None,  # validated by spec_from_mapping
    "benchmark": {"columns"},
    "oster": {"deltas", "rmaxes", "mode"},
    "selection": {"bootstrap_b", "models", "seed"},
    "kob": {"bootstrap_b", "seed"},
    "pbot": {"marginal_share", "bootstrap_b", "fe_mode", "monotonicity",
             "rank_validity", "seed"},
}

BENCHMARK_COLUMNS = ("none", "individual", "judge_attorney", "court_fe", "full")


def _parse_config(path: str, overrides: list[str]) -> dict:
    cp = configparser.ConfigParser(interpolation=None)
    read = cp.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    cfg: dict[str, dict[str, str]] = {}
    for section in cp.sections():
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        cfg[section] = dict(cp.items(section))
        known = _KNOWN_KEYS[section]
        if known is not None:
            unknown = set(cfg[section]) - known
            if unknown:
                raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        target, value = item.split("=", 1)
        section, key = target.split(".", 1)
        if section not in _KNOWN_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        known = _KNOWN_KEYS[section]
        if known is not None and key not in known:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        cfg.setdefault(section, {})[key.strip()] = value.strip()
    return cfg


def _config_hash(cfg: dict) -> str:
    canonical = []
    for sec in sorted(cfg):
        for k in sorted(cfg[sec]):
            canonical.append(f"{sec}.{k}={cfg[sec][k]}")
    return hashlib.sha256("\n".join(canonical).encode()).hexdigest()[:16]


def _csv_list(raw: str) -> list[str]:
    return [tok.strip() for tok in raw.split(",") if tok.strip()]


def _analyses(cfg: dict) -> list[str]:
    raw = cfg.get("run", {}).get("analyses", "")
    names = _csv_list(raw)
    if not names:
        raise ConfigError("no analyses requested ([run] analyses)")
    bad = [a for a in names if a not in ANALYSES]
    if bad:
        raise ConfigError(f"unknown analyses: {bad}")
    # prerequisites: oster needs the benchmark columns it extrapolates from
    if "oster" in names:
        cols = _csv_list(cfg.get("benchmark", {}).get("columns", ""))
        if cols and not {"none", "full"} <= set(cols):
            raise ConfigError(
                "oster requires benchmark columns 'none' and 'full'; "
                f"configured columns {cols} are insufficient")
        if "benchmark" not in names:
            names.insert(names.index("oster"), "benchmark")
    return names


def _build_sample(cfg: dict, analyses: list[str], outdir: Path, report: rep.AuditReport):
    data_cfg = cfg.get("data", {})
    dgp_cfg = cfg.get("dgp", {})
    input_path = data_cfg.get("input_path", "")
    if input_path and dgp_cfg:
        raise ConfigError("provide either [data] input_path or a [dgp] block, not both")
    if "simulate" in analyses or dgp_cfg:
        if not dgp_cfg:
            raise ConfigError("simulate requested but no [dgp] block present")
        spec = dgpmod.spec_from_mapping(dgp_cfg)
        dataset = dgpmod.generate(spec)
        out_csv = outdir / "simulated_cases.csv"
        ingest.write_records_csv(dataset.records, out_csv)
        report.metadata["simulated_cases"] = out_csv.name
        report.metadata["dgp_seed"] = spec.seed
        sample = dgpmod.sample_from_synthetic(dataset)
        return sample, None
    if not input_path:
        raise ConfigError("no input: set [data] input_path or a [dgp] block")
    records = ingest.read_records_csv(input_path)
    rules = ingest.RestrictionRules(
        max_case_days=int(data_cfg.get("max_case_days", 730)),
        min_detention_probability=float(data_cfg.get("min_detention_probability", 0.05)),
        min_judge_cases=int(data_cfg.get("min_judge_cases", 10)),
        min_attorney_prior_cases=int(data_cfg.get("min_attorney_prior_cases", 10)),
        history_start_date=data_cfg.get("history_start_date") or None,
    )
    built = ingest.build_sample(records, rules)
    for rule, count in built.ledger.items():
        report.metadata[f"exclusions.{rule}"] = count
    return built.sample, built


def _run_benchmark(cfg, sample):
    cols = _csv_list(cfg.get("benchmark", {}).get("columns", "")) or list(BENCHMARK_COLUMNS)
    bad = [c for c in cols if c not in bench.COLUMN_PRESETS]
    if bad:
        raise ConfigError(f"unknown benchmark columns: {bad}")
    results = []
    for name in cols:
        spec = bench.BenchmarkSpec(control_sets=bench.COLUMN_PRESETS[name])
        results.append(bench.run_benchmark(sample, spec, name=name))
    return results


def _run_oster(cfg, sample, bench_results):
    by_name = {r.name: r for r in bench_results}
    if "none" not in by_name or "full" not in by_name:
        raise ConfigError("oster requires benchmark columns 'none' and 'full'")
    ocfg = cfg.get("oster", {})
    mode = ocfg.get("mode", "restricted")
    tau = bench.treatment_residual_variance(
        sample, bench.BenchmarkSpec(control_sets=bench.COLUMN_PRESETS["full"]))
    group = sample.df[smp.GROUP].to_numpy(dtype=float)
    inputs = oster.from_fit_pair(
        by_name["none"], by_name["full"], n_obs=sample.n,
        var_outcome=float(np.var(sample.df[smp.RELEASED].to_numpy(dtype=float))),
        var_treatment=float(np.var(group)),
        tau_treatment=tau,
    )
    deltas = [float(x) for x in _csv_list(ocfg.get("deltas", ""))] or oster.DEFAULT_DELTAS
    rmaxes = [float(x) for x in _csv_list(ocfg.get("rmaxes", ""))] or oster.DEFAULT_RMAXES
    grid_df = oster.grid(inputs, deltas, rmaxes, mode=mode)
    return grid_df, inputs, mode


def _run_selection(cfg, sample, seed):
    scfg = cfg.get("selection", {})
    B = int(scfg.get("bootstrap_b", 500))
    sd = int(scfg.get("seed", seed))
    fits = {}
    for tag, controls in (("col1_none", ()),
                          ("col2_individual", ("individual",)),
                          ("col3_court", ("court_covariates",)),
                          ("col4_full", ("individual", "court_covariates"))):
        fits[tag] = sel.heckit(sample, controls, bootstrap_b=B, seed=sd)
    verdict = sel.ovb_verdict(fits)
    models = _csv_list(scfg.get("models", "")) or []
    newey_fits = {}
    for model in models:
        newey_fits[f"model_{model}"] = sel.newey_correction(
            sample, model, ("individual", "court_covariates"),
            bootstrap_b=B, seed=sd)
    return fits, verdict, newey_fits


def _run_kob(cfg, sample, seed):
    kcfg = cfg.get("kob", {})
    B = int(kcfg.get("bootstrap_b", 200))
    sd = int(kcfg.get("seed", seed))
    results = []
    for outcome_name in ("release", "misconduct"):
        for residualize in (False, True):
            results.append(kobmod.kob(sample, outcome_name, residualize,
                                      bootstrap_b=B, seed=sd))
    raw_release = next(r for r in results if r.outcome == "release" and not r.residualized)
    raw_mc = next(r for r in results if r.outcome == "misconduct" and not r.residualized)
    note = kobmod.kob_interpretation(raw_release, raw_mc)
    return results, note


def _run_pbot(cfg, sample, seed):
    pcfg = cfg.get("pbot", {})
    share = float(pcfg.get("marginal_share", 0.10))
    B = int(pcfg.get("bootstrap_b", 200))
    sd = int(pcfg.get("seed", seed))
    fe_mode = pcfg.get("fe_mode", "covariates")
    kpt_res = outc.kpt_test(sample)
    pbot_res = outc.pbot(sample, share, bootstrap_b=B, seed=sd, fe_mode=fe_mode)
    hist = outc.propensity_histogram(sample, fe_mode=fe_mode)
    mono = {}
    if pcfg.get("monotonicity", "true").lower() in ("1", "true", "yes"):
        for key, outcome_name in (("TD1", "release"), ("TD2", "misconduct")):
            try:
                mono[key] = outc.monotonicity_check(sample, outcome_name)
            except (DataError, EstimationError):
                mono[key] = None
    rank_tab = None
    if pcfg.get("rank_validity", "false").lower() in ("1", "true", "yes"):
        rank_tab = outc.rank_validity(sample, marginal_share=share)
    return kpt_res, pbot_res, hist, mono, rank_tab


def run_audit(config_path: str, overrides: list[str] | None = None,
              force_analyses: list[str] | None = None) -> int:
    cfg = _parse_config(config_path, overrides or [])
    if force_analyses is not None:
        cfg.setdefault("run", {})["analyses"] = ", ".join(force_analyses)
    analyses = _analyses(cfg)
    run_cfg = cfg.get("run", {})
    outdir = Path(run_cfg.get("output_dir", "audit_out"))
    outdir.mkdir(parents=True, exist_ok=True)
    seed = int(run_cfg.get("seed", 0))
    labels = tuple(_csv_list(run_cfg.get("group_labels", ""))) or ("group0", "group1")
    if len(labels) != 2:
        raise ConfigError("group_labels must name exactly two groups")
    threads = int(run_cfg.get("threads", os.environ.get("AUDIT_THREADS", "1")))

    report = rep.AuditReport()
    report.metadata["version"] = __version__
    report.metadata["seed"] = seed
    report.metadata["analyses"] = ",".join(analyses)
    cfg_hash = _config_hash(cfg)
    report.metadata["config_hash"] = cfg_hash

    prior = outdir / "report.kv"
    if prior.exists():
        for line in prior.read_text().splitlines():
            if line.startswith("meta.config_hash = "):
                old = line.split("=", 1)[1].strip()
                if old != cfg_hash:
                    print(f"warning: output_dir holds a report for config {old}, "
                          f"rerunning with {cfg_hash}", file=sys.stderr)

    sample, _built = _build_sample(cfg, analyses, outdir, report)

    status = 0

    def guarded(name, fn):
        nonlocal status
        try:
            return fn()
        except ConfigError as exc:
            raise
        except DataError as exc:
            report.add_error(name, str(exc))
            status = max(status, 3)
        except (EstimationError, np.linalg.LinAlgError) as exc:
            report.add_error(name, str(exc))
            status = max(status, 4)
        return None

    # benchmark feeds oster, so those two run first and in order
    bench_results = None
    if "benchmark" in analyses:
        bench_results = guarded("benchmark", lambda: _run_benchmark(cfg, sample))
        if bench_results is not None:
            report.add(rep.block_benchmark(bench_results))
    if "oster" in analyses:
        if bench_results is None:
            raise ConfigError("oster scheduled without a completed benchmark run")
        res = guarded("oster", lambda: _run_oster(cfg, sample, bench_results))
        if res is not None:
            report.add(rep.block_oster(*res))

    # remaining analyses are independent; each job returns a list of blocks
    def describe_job():
        return [rep.block_describe(ingest.describe_sample(sample, labels), labels)]

    def selection_job():
        fits, verdict, newey_fits = _run_selection(cfg, sample, seed)
        blocks = [rep.block_selection(fits, verdict)]
        if newey_fits:
            blocks.append(rep.block_newey(newey_fits))
        return blocks

    def kob_job():
        results, note = _run_kob(cfg, sample, seed)
        blk = rep.block_kob(results)
        blk.kv["pattern"] = note.pattern
        return [blk]

    def pbot_job():
        kpt_res, pbot_res, hist, mono, rank_tab = _run_pbot(cfg, sample, seed)
        blk = rep.Block("T4b", {"kpt.gap": kpt_res.gap, "kpt.se": kpt_res.se,
                                "kpt.mean_dep": kpt_res.mean_misconduct,
                                "pbot.gap": pbot_res.diff_in_means,
                                "pbot.se": pbot_res.bootstrap_se,
                                "pbot.mean_dep_marginal":
                                    pbot_res.marginal_sample_mean_misconduct,
                                "pbot.marginal_share": pbot_res.marginal_share},
                        "T4b. Outcome tests: released-sample gap "
                        f"{kpt_res.gap:.4f} ({kpt_res.se:.4f}), marginal-sample gap "
                        f"{pbot_res.diff_in_means:.4f} ({pbot_res.bootstrap_se:.4f})")
        blocks = [blk, rep.block_histogram(hist)]
        for key, m in mono.items():
            if m is not None:
                blocks.append(rep.block_monotonicity(m, key))
        if rank_tab is not None:
            blocks.append(rep.block_rank_validity(rank_tab))
        return blocks

    jobs = [(name, fn) for name, fn in (
        ("describe", describe_job), ("selection", selection_job),
        ("kob", kob_job), ("pbot", pbot_job)) if name in analyses]

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [(name, pool.submit(fn)) for name, fn in jobs]
            results = [(name, guarded(name, fut.result)) for name, fut in futures]
    else:
        results = [(name, guarded(name, fn)) for name, fn in jobs]
    for _, blocks in results:
        for blk in blocks or []:
            report.add(blk)

    (outdir / "report.kv").write_text(report.machine_text())
    (outdir / "report.txt").write_text(report.human_text())
    return status


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="audit",
                                     description="decision-audit toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in ("run", "simulate", "validate"):
        p = sub.add_parser(cmd)
        p.add_argument("config")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE")
        p.add_argument("--output-dir", default=None)
        p.add_argument("--seed", default=None)
    args = parser.parse_args(argv)

    overrides = list(args.overrides)
    if args.output_dir:
        overrides.append(f"run.output_dir={args.output_dir}")
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")

    try:
        if args.command == "validate":
            cfg = _parse_config(args.config, overrides)
            _analyses(cfg)
            if "dgp" in cfg:
                dgpmod.spec_from_mapping(cfg["dgp"])
            print("config ok")
            return 0
        if args.command == "simulate":
            return run_audit(args.config, overrides, force_analyses=["simulate"])
        return run_audit(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (EstimationError, AuditError) as exc:
        print(f"estimation error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
