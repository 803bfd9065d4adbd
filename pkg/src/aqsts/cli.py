"""Command-line entry point: ``aqsts <command> ...``.

Exit codes: 0 success, 1 invalid inputs, 2 simulation failure (partial
outputs kept).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from aqsts import analyzer as A
from aqsts.config import ConfigError, load_config, prepare, validate_inputs
from aqsts.ess import GenerationLimits, InsufficientSamples, compute_limits
from aqsts.network import NetworkError
from aqsts.profiles import ProfileError, load_profiles, read_profile_file
from aqsts.rundir import RunDirectoryError, read_manifest, read_run_directory

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2
METRICS = ("losses", "switching", "telescoping", "voltage", "flexibility", "reactive", "reserve", "ess",
           "heatmap", "distribution")
INPUT_ERRORS = (ConfigError, NetworkError, ProfileError, FileNotFoundError, ValueError)

log = logging.getLogger("aqsts")


def _emit(args, payload: dict, lines: Sequence[str]) -> None:
    if getattr(args, "json", False):
        print(json.dumps(payload, indent=2, sort_keys=True, default=str))
    else:
        for line in lines:
            print(line)


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# -- validate -------------------------------------------------------------------

def cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
        report, model = validate_inputs(cfg)
        if not report.ok:
            return _fail(f"{cfg.network}\n{report}", EXIT_INVALID)
        profiles = load_profiles(cfg.profiles, model)
        inputs = prepare(cfg, model, profiles)
    except INPUT_ERRORS as exc:
        return _fail(str(exc), EXIT_INVALID)
    payload = {"valid": True, "config_hash": cfg.hash, "network": model.name, "buses": len(model.buses),
               "profile_steps": profiles.n_steps, "profile_resolution": profiles.resolution,
               "ess_limits": len(inputs.limits)}
    _emit(args, payload, [f"{args.config}: valid ({len(model.buses)} buses, {profiles.n_steps} profile steps "
                          f"at {profiles.resolution} min)"])
    return EXIT_OK


# -- run --------------------------------------------------------------------------

def cmd_run(args) -> int:
    from aqsts.runner import run_to_directory
    try:
        cfg = load_config(args.config)
        if args.workers or args.mode:
            cfg = cfg.with_scheduler(**{k: v for k, v in (("workers", args.workers), ("mode", args.mode)) if v})
        report, model = validate_inputs(cfg)
        if not report.ok:
            return _fail(f"{cfg.network}\n{report}", EXIT_INVALID)
        inputs = prepare(cfg, model)
    except INPUT_ERRORS as exc:
        return _fail(str(exc), EXIT_INVALID)
    try:
        store, paths = run_to_directory(inputs, args.output, args.steps)
    except RunDirectoryError as exc:
        return _fail(str(exc), EXIT_FAILED)
    summary = _summary(store, paths["root"])
    _emit(args, summary, [f"run '{cfg.name}': {store.n_steps} steps recorded, "
                          f"{len(store.actions)} operator actions, {len(store.failures)} failed segment(s)",
                          f"output: {paths['root']}"])
    for f in store.failures:
        print(f"segment {f['segment']} failed at step {f['step']}: {f['reason']}", file=sys.stderr)
    return EXIT_FAILED if store.failures else EXIT_OK


def _summary(store, root) -> dict:
    return {"run_dir": str(root), "recorded_steps": int(store.n_steps), "actions": int(len(store.actions)),
            "failed_segments": len(store.failures), "resolution_min": store.resolution}


# -- analyze ------------------------------------------------------------------------

def analyze_directory(run_dir: str | Path, metrics: Sequence[str] = METRICS, window: str = "year",
                      figures: bool = False) -> dict:
    """Compute the requested metrics and write them under ``<run_dir>/metrics``."""
    root = Path(run_dir)
    manifest = read_manifest(root)
    store = read_run_directory(root)
    start_days = tuple(manifest.get("period_start_days") or (0,))
    win = A.MetricWindow.parse(window, store.resolution, start_days)
    out = root / "metrics"
    out.mkdir(exist_ok=True)
    summary: dict = {"window": win.label, "recorded_steps": int(store.n_steps)}
    long_parts = []
    tables: dict[str, pd.DataFrame] = {}

    if "losses" in metrics:
        loss = A.losses(store, win)
        tables["losses"] = loss.per_step
        summary["losses"] = loss.as_dict()
        summary["losses"]["dual_formula_max_gap_MW"] = float(
            (loss.per_step["injection_MW"] - loss.per_step["branch_MW"]).abs().max()) if len(loss.per_step) else None
        if len(loss.per_step):
            summary["losses"]["peak_snapshot"] = A.peak_snapshot_loss(store, A.losses(store))
        long_parts.append(A.long_format("losses", loss.per_step, "system", "step", ["injection_MW", "branch_MW"]))
    if "switching" in metrics:
        sw = A.switching_counts(store, win)
        tables["switching"] = sw
        summary["switching"] = {c: int(sw[c].sum()) for c in sw.columns if c != "device"}
        long_parts.append(A.long_format("switching", sw, "device", None, ["disconnects", "reconnects", "tap_ops",
                                                                          "shunt_ops"]))
    if "telescoping" in metrics:
        tel = A.telescoping_check(store, win)
        tables["telescoping"] = tel
        summary["telescoping_max_mismatch"] = float(tel["mismatch"].abs().max()) if len(tel) else 0.0
    if "voltage" in metrics and len(win.rows(store)):
        vs = A.voltage_statistics(store, window=win)
        tables["voltage"] = vs
        summary["voltage"] = {"excursions": int(vs["excursions"].sum()), "min_pu": float(vs["min"].min()),
                              "max_pu": float(vs["max"].max())}
        long_parts.append(A.long_format("voltage", vs, "bus", None, ["min", "q1", "median", "q3", "max", "excursions"]))
    if "flexibility" in metrics:
        fx = A.flexibility(store, win)
        tables["flexibility"] = fx
        summary["flexibility"] = {"min_pii_MW": float(fx["pii_MW"].min()) if len(fx) else None,
                                  "min_pde_MW": float(fx["pde_MW"].min()) if len(fx) else None}
        long_parts.append(A.long_format("flexibility", fx, "system", "step", ["pii_MW", "pde_MW"]))
    if "reactive" in metrics:
        tables["reactive"] = A.reactive_availability(store, win)
    if "reserve" in metrics:
        tables["reserve"] = A.agc_reserve_series(store, win)
    if "ess" in metrics:
        energy = A.store_energy_frame(store, win)
        util = A.ess_utilization(energy, "year")
        tables["ess_utilization"] = util
        tables["ess_daily"] = A.ess_utilization(energy, "day")
        summary["ess"] = {str(r["unit"]): (None if pd.isna(r["marketable_ratio"]) else float(r["marketable_ratio"]))
                          for _, r in util.iterrows()}
    if "heatmap" in metrics and store.n_steps:
        hm = A.load_heatmap(store)
        tables["heatmap"] = hm.reset_index()
    dists = []
    if "distribution" in metrics and manifest.get("ess_limits"):
        limits = {(d["zone"], int(d["period"])): GenerationLimits(**d) for d in manifest["ess_limits"]}
        for (zone, period) in sorted(limits):
            if len(A.MetricWindow.seasonal(period, start_days).rows(store)):
                dists.append(A.store_generation_distribution(store, zone, period, limits, start_days))
        (out / "distribution.json").write_text(json.dumps(dists, indent=2) + "\n", encoding="utf-8")

    for name, frame in tables.items():
        frame.to_csv(out / f"{name}.csv", index=False, float_format="%.10g", lineterminator="\n")
    long_parts = [f for f in long_parts if len(f)]
    if long_parts:
        pd.concat(long_parts, ignore_index=True).to_csv(out / "long.csv", index=False, float_format="%.10g",
                                                        lineterminator="\n")
    if figures:
        summary["figures"] = [str(p) for p in _figures(store, tables, dists, out / "figures")]
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n",
                                      encoding="utf-8")
    return summary


def _figures(store, tables: dict, dists: list, directory: Path) -> list[Path]:
    from aqsts import plots
    directory.mkdir(exist_ok=True)
    made = []
    if "losses" in tables and len(tables["losses"]):
        made.append(plots.loss_series(tables["losses"], store.resolution, directory / "losses.png"))
    if "voltage" in tables:
        made.append(plots.voltage_boxes(store, tables["voltage"]["bus"].tolist(), directory / "voltage.png"))
    if "heatmap" in tables:
        made.append(plots.heatmap(tables["heatmap"].set_index("dow"), directory / "load_heatmap.png"))
    if "ess_utilization" in tables and len(tables["ess_utilization"]):
        made.append(plots.utilization_bars(tables["ess_utilization"], directory / "ess_utilization.png"))
    for d in dists:
        made.append(plots.distribution(d, directory / f"distribution_{d['zone']}_p{d['period']}.png"))
    return made


def cmd_analyze(args) -> int:
    metrics = args.metric or list(METRICS)
    unknown = set(metrics) - set(METRICS)
    if unknown:
        return _fail(f"unknown metric(s) {sorted(unknown)}; choose from {', '.join(METRICS)}", EXIT_INVALID)
    try:
        summary = analyze_directory(args.run_dir, metrics, args.window, args.figures)
    except (RunDirectoryError, ValueError, FileNotFoundError) as exc:
        return _fail(str(exc), EXIT_INVALID)
    lines = [f"{k}: {v}" for k, v in summary.items()]
    _emit(args, summary, lines)
    return EXIT_OK


# -- resolution study ----------------------------------------------------------------

def cmd_resolution_study(args) -> int:
    from aqsts.runner import simulate
    try:
        resolutions = [int(x) for x in args.resolutions.split(",") if x]
        cfg = load_config(args.config)
        inputs = prepare(cfg)
    except INPUT_ERRORS as exc:
        return _fail(str(exc), EXIT_INVALID)
    horizon_min = args.steps * cfg.engine.resolution if args.steps else None

    def run(res: int):
        steps = None if horizon_min is None else horizon_min // res
        return simulate(inputs, resolution=res, steps=steps)[0]

    try:
        table = A.resolution_study(run, resolutions)
    except ValueError as exc:
        return _fail(str(exc), EXIT_INVALID)
    if args.output:
        Path(args.output).parent.mkdir(parents=True, exist_ok=True)
        table.to_csv(args.output, index=False, float_format="%.10g", lineterminator="\n")
    _emit(args, {"rows": table.to_dict(orient="records")}, [table.to_string(index=False)])
    return EXIT_FAILED if table["failures"].sum() else EXIT_OK


# -- limits ----------------------------------------------------------------------

def _period_map(spec: str | None, n: int, resolution: int, start: pd.Timestamp) -> np.ndarray:
    if not spec:
        return np.ones(n, dtype=int)
    path = Path(spec)
    if path.exists():
        frame = pd.read_csv(path)
        col = "period" if "period" in frame else frame.columns[-1]
        values = frame[col].to_numpy(dtype=int)
        if values.size != n:
            raise ValueError(f"{path}: {values.size} period entries for {n} profile steps")
        return values
    starts = np.array(sorted(int(x) for x in spec.split(",")))
    day = (np.arange(n) * resolution // 1440 + start.dayofyear - 1) % 365
    return np.searchsorted(starts, day, side="right")


def cmd_limits(args) -> int:
    try:
        data = read_profile_file(args.profiles)
        periods = _period_map(args.periods, data.n_steps, data.resolution, data.start)
        series = {c: data.series[c] for c in (args.columns.split(",") if args.columns else data.columns)}
        limits = compute_limits(series, periods)
    except (ProfileError, FileNotFoundError, ValueError, KeyError, InsufficientSamples) as exc:
        return _fail(str(exc), EXIT_INVALID)
    rows = [{"zone": z, "period": p, "gen_max_lim": v.gen_max_lim, "gen_min_lim": v.gen_min_lim,
             "mu": v.mu, "sigma": v.sigma} for (z, p), v in sorted(limits.items())]
    lines = [f"{r['zone']} period {r['period']}: max {r['gen_max_lim']:.4f} min {r['gen_min_lim']:.4f} "
             f"(mu {r['mu']:.4f}, sigma {r['sigma']:.4f})" for r in rows]
    _emit(args, {"limits": rows}, lines)
    return EXIT_OK


# -- example ---------------------------------------------------------------------

def cmd_example(args) -> int:
    from aqsts.example import write_example
    paths = write_example(args.directory, days=args.days, resolution=args.resolution, seed=args.seed)
    _emit(args, {k: str(v) for k, v in paths.items()}, [f"{k}: {v}" for k, v in paths.items()])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aqsts", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--json", action="store_true", help="machine-readable summary on stdout")
        sp.set_defaults(func=fn)
        return sp

    sp = add("validate", cmd_validate, "check a configuration and every input it references")
    sp.add_argument("config")
    sp = add("run", cmd_run, "run the simulation and write a run directory")
    sp.add_argument("config")
    sp.add_argument("--output", help="run directory (default: config output_dir)")
    sp.add_argument("--workers", type=int)
    sp.add_argument("--mode", choices=["parallel", "sequential"])
    sp.add_argument("--steps", type=int, help="limit the horizon to N steps")
    sp = add("analyze", cmd_analyze, "compute metrics from a run directory")
    sp.add_argument("run_dir")
    sp.add_argument("--metric", action="append", choices=METRICS)
    sp.add_argument("--window", default="year", help="year | day:N | week:N | period:N | steps:A-B")
    sp.add_argument("--figures", action="store_true", help="also render PNG figures (needs matplotlib)")
    sp = add("resolution-study", cmd_resolution_study, "compare runtime and losses across resolutions")
    sp.add_argument("config")
    sp.add_argument("--resolutions", default="5,15,30,60")
    sp.add_argument("--steps", type=int, help="horizon in steps at the configured resolution")
    sp.add_argument("--output", help="write the table as CSV")
    sp = add("limits", cmd_limits, "print storage generation limits mu +/- 1.5 sigma")
    sp.add_argument("profiles")
    sp.add_argument("--periods", help="period CSV (one row per step) or comma-separated period start days")
    sp.add_argument("--columns", help="comma-separated profile columns (default: all)")
    sp = add("example", cmd_example, "write the bundled two-zone example inputs")
    sp.add_argument("directory")
    sp.add_argument("--days", type=int, default=365)
    sp.add_argument("--resolution", type=int, default=5)
    sp.add_argument("--seed", type=int, default=2035)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
