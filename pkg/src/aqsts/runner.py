"""Glue between a run configuration, the scheduler and the run directory."""

from __future__ import annotations

import dataclasses
from pathlib import Path

from aqsts.config import RunConfig, RunInputs, prepare
from aqsts.rundir import write_run_directory
from aqsts.scheduler import AnnualResultStore, EngineInputs, RunPlan, execute, make_plan


def engine_inputs(inputs: RunInputs, resolution: int | None = None) -> EngineInputs:
    cfg = inputs.config
    engine = cfg.engine if resolution is None else dataclasses.replace(cfg.engine, resolution=resolution)
    ess = inputs.ess
    if ess is not None and resolution is not None and resolution != cfg.engine.resolution:
        ess = prepare(cfg.with_resolution(resolution), inputs.model, inputs.profiles).ess
    return EngineInputs(inputs.model, inputs.profiles, engine, cfg.operator, cfg.powerflow, ess)


def plan_for(inputs: RunInputs, resolution: int | None = None, steps: int | None = None) -> RunPlan:
    cfg = inputs.config
    res = resolution or cfg.engine.resolution
    available = inputs.profiles.n_steps * inputs.profiles.resolution // res
    start = cfg.horizon_start * cfg.engine.resolution // res
    n = steps if steps is not None else (cfg.horizon_steps * cfg.engine.resolution // res
                                         if cfg.horizon_steps is not None else available - start)
    n = min(n, available - start)
    return make_plan(n, res, cfg.scheduler.mode, cfg.scheduler.workers, cfg.scheduler.warm_in_steps, start)


def simulate(inputs: RunInputs, resolution: int | None = None, steps: int | None = None,
             plan: RunPlan | None = None) -> tuple[AnnualResultStore, RunPlan]:
    plan = plan_for(inputs, resolution, steps) if plan is None else plan
    return execute(plan, engine_inputs(inputs, resolution)), plan


def manifest_for(inputs: RunInputs, plan: RunPlan) -> dict:
    cfg = inputs.config
    limits = [dataclasses.asdict(v) for _, v in sorted(inputs.limits.items())]
    return {"name": cfg.name, "config_hash": cfg.hash, "config": cfg.document,
            "config_path": None if cfg.source is None else str(cfg.source),
            "seed": cfg.seed, "plan": {"mode": plan.mode, "workers": plan.worker_count,
                                       "segments": len(plan.segments)},
            "period_start_days": list(cfg.period_start_days), "ess_limits": limits,
            "profile_resolution": inputs.profiles.resolution}


def run_to_directory(inputs: RunInputs, output: str | Path | None = None, steps: int | None = None):
    store, plan = simulate(inputs, steps=steps)
    paths = write_run_directory(store, output or inputs.config.output_dir, manifest_for(inputs, plan))
    return store, paths
