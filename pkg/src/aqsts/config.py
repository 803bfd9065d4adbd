"""
Run configuration and input assembly.

One YAML file is authoritative. Only ``AQSTS_OUTPUT_DIR`` and
``AQSTS_WORKERS`` may override it from the environment.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import pandas as pd
import yaml

from aqsts.engine import EngineConfig, EssSettings
from aqsts.ess import GenerationLimits, PeakCalendar, compute_limits
from aqsts.network import NetworkModel, ValidationReport, load_network, validate
from aqsts.operator import OperatorThresholds
from aqsts.powerflow import PowerFlowSettings
from aqsts.profiles import TimeSeriesDataset, load_profiles

ENV_OUTPUT = "AQSTS_OUTPUT_DIR"
ENV_WORKERS = "AQSTS_WORKERS"
DEFAULT_PERIOD_START_DAYS = (0,)


class ConfigError(Exception):
    """Invalid or incomplete run configuration."""


@dataclasses.dataclass(frozen=True)
class EssOptions:
    enabled: bool = True
    limits: str = "computed"
    soc_balance: float | None = None
    block_all_peak_charging: bool = False


@dataclasses.dataclass(frozen=True)
class SchedulerOptions:
    mode: str = "parallel"
    workers: int = 1
    warm_in_steps: int = 12

    def __post_init__(self):
        if self.mode not in ("parallel", "sequential"):
            raise ConfigError(f"scheduler.mode must be parallel or sequential, not {self.mode!r}")
        if self.workers < 1 or self.warm_in_steps < 0:
            raise ConfigError("scheduler.workers must be >= 1 and warm_in_steps >= 0")


@dataclasses.dataclass(frozen=True)
class RunConfig:
    name: str
    source: Path | None
    network: Path
    profiles: tuple[Path, ...]
    peak_calendar: Path | None
    period_start_days: tuple[int, ...]
    engine: EngineConfig
    powerflow: PowerFlowSettings
    operator: OperatorThresholds
    ess: EssOptions
    scheduler: SchedulerOptions
    horizon_start: int
    horizon_steps: int | None
    output_dir: Path
    seed: int
    document: Mapping[str, Any]

    @property
    def hash(self) -> str:
        return config_hash(self.document)

    def with_resolution(self, resolution: int) -> "RunConfig":
        return dataclasses.replace(self, engine=dataclasses.replace(self.engine, resolution=resolution))

    def with_scheduler(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, scheduler=dataclasses.replace(self.scheduler, **changes))


def config_hash(document: Mapping[str, Any]) -> str:
    canonical = json.dumps(document, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _section(doc: Mapping, name: str, cls, source: str):
    raw = dict(doc.get(name) or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{source}: unknown key(s) {sorted(unknown)} in section '{name}'")
    if cls is PowerFlowSettings and "damping_schedule" in raw:
        raw["damping_schedule"] = tuple(raw["damping_schedule"])
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: section '{name}': {exc}") from exc


def config_from_dict(doc: Mapping[str, Any], base_dir: Path, source: Path | None = None,
                     env: Mapping[str, str] | None = None, check_files: bool = True) -> RunConfig:
    env = os.environ if env is None else env
    label = str(source) if source else "<config>"
    if "network" not in doc or "profiles" not in doc:
        raise ConfigError(f"{label}: 'network' and 'profiles' are required")

    def resolve(p: str | None) -> Path | None:
        if p is None:
            return None
        path = Path(p)
        return path if path.is_absolute() else base_dir / path

    network = resolve(doc["network"])
    files = doc["profiles"]
    profiles = tuple(resolve(f) for f in ([files] if isinstance(files, str) else files))
    peak = resolve(doc.get("peak_calendar"))
    if check_files:
        for p in (network, *profiles, peak):
            if p is not None and not p.exists():
                raise ConfigError(f"{label}: referenced file not found: {p}")

    periods = doc.get("periods") or {}
    starts = tuple(int(d) for d in periods.get("start_days", DEFAULT_PERIOD_START_DAYS))
    if not starts or starts[0] != 0 or list(starts) != sorted(set(starts)):
        raise ConfigError(f"{label}: periods.start_days must be strictly increasing and start at 0")

    sched = dict(doc.get("scheduler") or {})
    if ENV_WORKERS in env:
        try:
            sched["workers"] = int(env[ENV_WORKERS])
        except ValueError as exc:
            raise ConfigError(f"{ENV_WORKERS}={env[ENV_WORKERS]!r} is not an integer") from exc
    ess = dict(doc.get("ess") or {})
    horizon = doc.get("horizon") or {}
    out = env.get(ENV_OUTPUT) or doc.get("output_dir") or f"runs/{doc.get('name', 'run')}"
    return RunConfig(
        name=str(doc.get("name", "run")),
        source=source,
        network=network,
        profiles=profiles,
        peak_calendar=peak,
        period_start_days=starts,
        engine=_section(doc, "engine", EngineConfig, label),
        powerflow=_section(doc, "powerflow", PowerFlowSettings, label),
        operator=_section(doc, "operator", OperatorThresholds, label),
        ess=_section({"ess": ess}, "ess", EssOptions, label),
        scheduler=_section({"scheduler": sched}, "scheduler", SchedulerOptions, label),
        horizon_start=int(horizon.get("start", 0) or 0),
        horizon_steps=None if horizon.get("steps") is None else int(horizon["steps"]),
        output_dir=resolve(str(out)),
        seed=int(doc.get("seed", 0)),
        document=dict(doc),
    )


def load_config(path: str | Path, env: Mapping[str, str] | None = None, check_files: bool = True) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc, path.parent, path, env, check_files)


# -- calendars ------------------------------------------------------------------

def period_of_steps(n_steps: int, resolution: int, start_days: tuple[int, ...], day_offset: int = 0) -> np.ndarray:
    """Seasonal period number (1-based) of every step."""
    day = (np.arange(n_steps) * resolution // 1440 + day_offset) % 365
    return np.searchsorted(np.asarray(start_days), day, side="right")


def read_peak_calendar(path: str | Path) -> pd.DataFrame:
    path = Path(path)
    frame = pd.read_csv(path)
    if list(frame.columns[:2]) != ["start", "end"]:
        raise ConfigError(f"{path}: expected columns 'start,end'")
    frame["start"] = pd.to_datetime(frame["start"])
    frame["end"] = pd.to_datetime(frame["end"])
    if (frame["end"] <= frame["start"]).any():
        raise ConfigError(f"{path}: a peak window ends before it starts")
    return frame


def peak_calendar_for(windows: pd.DataFrame | None, start: pd.Timestamp, resolution: int) -> PeakCalendar:
    """Windows as half-open step intervals; a step is in peak when it begins inside a window."""
    if windows is None or windows.empty:
        return PeakCalendar((), resolution)
    a = (windows["start"] - start) / pd.Timedelta(minutes=resolution)
    b = (windows["end"] - start) / pd.Timedelta(minutes=resolution)
    ivs = sorted((int(np.ceil(x)), int(np.ceil(y))) for x, y in zip(a, b))
    merged: list[list[int]] = []
    for lo, hi in ivs:
        if hi <= lo:
            continue
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return PeakCalendar(tuple((lo, hi) for lo, hi in merged), resolution)


def zone_wind(model: NetworkModel, profiles: TimeSeriesDataset) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for g in model.generators:
        if g.kind.value == "wind" and g.zone is not None and g.id in profiles.series:
            out[g.zone] = out.get(g.zone, 0.0) + profiles.series[g.id]
    return out


def read_limits(path: str | Path) -> dict[tuple[str, int], GenerationLimits]:
    frame = pd.read_csv(path)
    need = {"zone", "period", "gen_max_lim", "gen_min_lim"}
    if not need <= set(frame.columns):
        raise ConfigError(f"{path}: limits file needs columns {sorted(need)}")
    out = {}
    for row in frame.itertuples(index=False):
        out[(str(row.zone), int(row.period))] = GenerationLimits(
            str(row.zone), int(row.period), float(row.gen_max_lim), float(row.gen_min_lim),
            float(getattr(row, "mu", np.nan)), float(getattr(row, "sigma", np.nan)))
    return out


# -- assembled inputs -------------------------------------------------------------

@dataclasses.dataclass
class RunInputs:
    config: RunConfig
    model: NetworkModel
    profiles: TimeSeriesDataset
    ess: EssSettings | None
    limits: dict
    peak_windows: pd.DataFrame | None


def validate_inputs(cfg: RunConfig) -> tuple[ValidationReport, NetworkModel]:
    model = load_network(cfg.network)
    return validate(model), model


def prepare(cfg: RunConfig, model: NetworkModel | None = None, profiles: TimeSeriesDataset | None = None) -> RunInputs:
    """Load and cross-check every input the engine needs."""
    if model is None:
        report, model = validate_inputs(cfg)
        if not report.ok:
            raise ConfigError(f"{cfg.network}: network invalid\n{report}")
    if profiles is None:
        profiles = load_profiles(cfg.profiles, model)
    res = cfg.engine.resolution
    if res % profiles.resolution:
        raise ConfigError(f"engine resolution {res} min is not a multiple of the profile resolution "
                          f"{profiles.resolution} min")
    windows = read_peak_calendar(cfg.peak_calendar) if cfg.peak_calendar else None
    ess = None
    limits: dict = {}
    if cfg.ess.enabled and model.ess:
        day0 = int(profiles.start.dayofyear) - 1
        if cfg.ess.limits == "computed":
            native = period_of_steps(profiles.n_steps, profiles.resolution, cfg.period_start_days, day0)
            limits = compute_limits(zone_wind(model, profiles), native)
        else:
            path = Path(cfg.ess.limits)
            if not path.is_absolute() and cfg.source is not None:
                path = cfg.source.parent / path
            limits = read_limits(path)
        coarse = profiles.resample(res)
        ess = EssSettings(limits, period_of_steps(coarse.n_steps, res, cfg.period_start_days, day0),
                          peak_calendar_for(windows, profiles.start, res), cfg.ess.soc_balance,
                          cfg.ess.block_all_peak_charging)
    return RunInputs(cfg, model, profiles, ess, limits, windows)
