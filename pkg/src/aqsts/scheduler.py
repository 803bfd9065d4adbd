"""
Weekly segmentation, execution and merging of an annual run.

In parallel mode every segment starts from the base planned state
re-targeted to a few steps before its first step, settles through a warm-in
window that is solved but not recorded, and then records its range.
Segments share nothing but immutable inputs, so the merged store does not
depend on how many workers ran them. Sequential mode chains segments
exactly.
"""

from __future__ import annotations

import dataclasses
import enum
import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from aqsts.engine import Engine, EngineConfig, EssSettings, InitializationFailure, StepFailure
from aqsts.network import NetworkModel
from aqsts.operator import OperatorAction, OperatorThresholds
from aqsts.powerflow import PowerFlowSettings
from aqsts.profiles import TimeSeriesDataset
from aqsts.state import SystemState, state_columns

log = logging.getLogger(__name__)

ACTION_COLUMNS = ["time_index", "sub_step", "stage", "kind", "device", "before", "after", "trigger", "segment"]


class Initialization(str, enum.Enum):
    BASE_CASE = "base_case"
    CHAINED = "chained"


class OverlapDetected(Exception):
    pass


class SegmentFailure(Exception):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"segment {index}: {cause}")
        self.index = index
        self.cause = cause


@dataclasses.dataclass(frozen=True)
class SegmentSpec:
    index: int
    t0: int
    t1: int
    initialization: Initialization = Initialization.BASE_CASE
    warm_in_steps: int = 12

    def __post_init__(self):
        if self.t1 <= self.t0 or self.warm_in_steps < 0:
            raise ValueError(f"segment {self.index}: empty range or negative warm-in")

    @property
    def n_steps(self) -> int:
        return self.t1 - self.t0


@dataclasses.dataclass(frozen=True)
class RunPlan:
    segments: tuple[SegmentSpec, ...]
    worker_count: int = 1
    mode: str = "parallel"

    def __post_init__(self):
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        if self.mode not in ("parallel", "sequential"):
            raise ValueError(f"unknown mode {self.mode!r}")


def partition(n_steps: int, resolution: int, warm_in_steps: int = 12, mode: str = "parallel",
              start: int = 0) -> list[SegmentSpec]:
    """7-day segments covering ``[start, start + n_steps)``; the remainder joins the last one."""
    if n_steps < 1:
        raise ValueError("horizon is empty")
    week = 7 * 1440 // resolution
    count = max(1, n_steps // week)
    init = Initialization.BASE_CASE if mode == "parallel" else Initialization.CHAINED
    out = []
    for k in range(count):
        t0 = start + k * week
        t1 = start + n_steps if k == count - 1 else t0 + week
        # the very first segment always starts from the base case and needs no warm-in
        kind = Initialization.BASE_CASE if k == 0 else init
        out.append(SegmentSpec(k, t0, t1, kind, warm_in_steps if kind is Initialization.BASE_CASE and t0 > 0 else 0))
    return out


# -- per-segment results --------------------------------------------------------------

@dataclasses.dataclass
class SegmentResult:
    spec: SegmentSpec
    steps: np.ndarray                 # recorded step indices
    states: np.ndarray                # (n, state vector length)
    entry: np.ndarray | None          # state just before t0 (or the recorded t0 state for step 0)
    actions: list[OperatorAction]
    diagnostics: list[dict]
    ess: list[dict]
    failure: dict | None = None

    @property
    def complete(self) -> bool:
        return self.failure is None

    def last_state(self, model: NetworkModel) -> SystemState | None:
        if not len(self.steps):
            return None
        return SystemState.from_vector(model, self.states[-1], int(self.steps[-1]))


def _failure_record(exc: Exception, segment: int) -> dict:
    if isinstance(exc, StepFailure):
        return {"segment": segment, "step": exc.t, "sub_step": exc.sub_step, "reason": exc.reason,
                "trace": exc.trace_lines()}
    if isinstance(exc, InitializationFailure):
        return {"segment": segment, "step": None, "sub_step": None, "reason": str(exc),
                "trace": [str(d) for d in exc.diagnostics]}
    return {"segment": segment, "step": None, "sub_step": None, "reason": f"{type(exc).__name__}: {exc}", "trace": []}


def run_segment(engine: Engine, spec: SegmentSpec, start: SystemState | None = None) -> SegmentResult:
    """Run one segment; failures end the segment and are recorded, not raised.

    ``start`` is the accepted state of step ``t0 - 1`` for chained segments.
    """
    steps, rows, actions, diags, ess = [], [], [], [], []
    entry = None
    try:
        if start is not None:
            s = start
            entry = s.to_vector()
            first = spec.t0
        elif spec.t0 == 0:
            s, _ = engine.initialize(0)
            entry = s.to_vector()
            steps.append(0)
            rows.append(entry)
            first = 1
        else:
            at = max(0, spec.t0 - 1 - spec.warm_in_steps)
            s, _ = engine.initialize(at)
            for t in range(at + 1, spec.t0):
                s = engine.advance(s, t).state
            entry = s.to_vector()
            first = spec.t0
        for t in range(first, spec.t1):
            out = engine.advance(s, t)
            s = out.state
            steps.append(t)
            rows.append(s.to_vector())
            actions.extend(out.actions)
            diags.extend(out.diagnostics)
            ess.extend(out.ess)
        failure = None
    except (StepFailure, InitializationFailure) as exc:
        failure = _failure_record(exc, spec.index)
        log.warning("segment %d stopped: %s", spec.index, exc)
    width = len(rows[0]) if rows else (len(entry) if entry is not None else 0)
    states = np.vstack(rows) if rows else np.zeros((0, width))
    return SegmentResult(spec, np.asarray(steps, dtype=np.int64), states, entry, actions, diags, ess, failure)


@dataclasses.dataclass
class EngineInputs:
    """Everything a worker needs to build its own engine."""

    model: NetworkModel
    profiles: TimeSeriesDataset
    config: EngineConfig
    thresholds: OperatorThresholds
    pf: PowerFlowSettings
    ess: EssSettings | None

    def engine(self) -> Engine:
        return Engine(self.model, self.profiles, self.config, self.thresholds, self.pf, self.ess)


_WORKER_INPUTS: EngineInputs | None = None
_WORKER_ENGINE: Engine | None = None


def _worker_init(inputs: EngineInputs) -> None:
    global _WORKER_INPUTS, _WORKER_ENGINE
    _WORKER_INPUTS, _WORKER_ENGINE = inputs, None


def _worker_run(spec: SegmentSpec) -> SegmentResult:
    global _WORKER_ENGINE
    if _WORKER_ENGINE is None:
        _WORKER_ENGINE = _WORKER_INPUTS.engine()
    return run_segment(_WORKER_ENGINE, spec)


def execute(plan: RunPlan, inputs: EngineInputs) -> "AnnualResultStore":
    """Run every segment of ``plan`` and merge the results in segment order."""
    engine = None
    results: list[SegmentResult] = []
    if plan.mode == "sequential":
        engine = inputs.engine()
        prev: SegmentResult | None = None
        for spec in plan.segments:
            start = None
            if spec.initialization is Initialization.CHAINED and prev is not None:
                start = prev.last_state(inputs.model) if prev.complete else None
                if start is None:
                    # chain broken by a failure: fall back to a base-case start
                    spec = dataclasses.replace(spec, initialization=Initialization.BASE_CASE, warm_in_steps=12)
            prev = run_segment(engine, spec, start)
            results.append(prev)
    elif plan.worker_count == 1:
        engine = inputs.engine()
        results = [run_segment(engine, spec) for spec in plan.segments]
    else:
        with ProcessPoolExecutor(max_workers=plan.worker_count, initializer=_worker_init,
                                 initargs=(inputs,)) as pool:
            results = list(pool.map(_worker_run, plan.segments))
    timestamps = inputs.profiles.resample(inputs.config.resolution).timestamps() \
        if inputs.profiles.resolution != inputs.config.resolution else inputs.profiles.timestamps()
    return merge(results, inputs.model, inputs.config.resolution, timestamps)


# -- merged store ------------------------------------------------------------------------

@dataclasses.dataclass
class AnnualResultStore:
    model: NetworkModel
    resolution: int
    steps: np.ndarray
    states: np.ndarray
    actions: pd.DataFrame
    diagnostics: pd.DataFrame
    ess: pd.DataFrame
    segments: list[dict]
    entries: dict[int, np.ndarray]     # first recorded step of a segment -> entry state vector
    failures: list[dict]
    start: pd.Timestamp | None = None

    @property
    def columns(self) -> list[tuple[str, str, str]]:
        return state_columns(self.model)

    @property
    def n_steps(self) -> int:
        return len(self.steps)

    def state(self, row: int) -> SystemState:
        return SystemState.from_vector(self.model, self.states[row], int(self.steps[row]))

    def slot(self, kind: str, quantity: str) -> np.ndarray:
        """Column indices of one (kind, quantity) block in device order."""
        return np.array([k for k, (a, _, q) in enumerate(self.columns) if a == kind and q == quantity], dtype=int)

    def block(self, kind: str, quantity: str) -> np.ndarray:
        return self.states[:, self.slot(kind, quantity)]

    def timestamps(self) -> pd.DatetimeIndex | None:
        if self.start is None:
            return None
        return self.start + pd.to_timedelta(self.steps * self.resolution, unit="min")

    def entry_before(self, row: int) -> np.ndarray:
        """State vector in force just before recorded row ``row`` was resolved."""
        t = int(self.steps[row])
        if t in self.entries:
            return self.entries[t]
        if row > 0 and int(self.steps[row - 1]) == t - 1:
            return self.states[row - 1]
        raise KeyError(f"no entry state recorded before step {t}")

    def same_as(self, other: "AnnualResultStore") -> bool:
        if not (np.array_equal(self.steps, other.steps) and self.states.tobytes() == other.states.tobytes()):
            return False
        if set(self.entries) != set(other.entries) or any(
                self.entries[k].tobytes() != other.entries[k].tobytes() for k in self.entries):
            return False
        return (self.actions.equals(other.actions) and self.ess.equals(other.ess)
                and self.diagnostics.equals(other.diagnostics))


def _actions_frame(actions: Iterable[OperatorAction], segment: int) -> pd.DataFrame:
    rows = [(a.time_index, a.sub_step, int(a.stage), a.kind.value, a.device, a.before, a.after, a.trigger, segment)
            for a in actions]
    return pd.DataFrame(rows, columns=ACTION_COLUMNS)


def merge(results: Sequence[SegmentResult], model: NetworkModel, resolution: int,
          timestamps: pd.DatetimeIndex | None = None) -> AnnualResultStore:
    """Fold segment results into one chronological store."""
    ordered = sorted(results, key=lambda r: r.spec.t0)
    for a, b in zip(ordered, ordered[1:]):
        if b.spec.t0 < a.spec.t1:
            raise OverlapDetected(f"segments {a.spec.index} [{a.spec.t0}, {a.spec.t1}) and "
                                  f"{b.spec.index} [{b.spec.t0}, {b.spec.t1}) overlap")
    width = len(state_columns(model))
    steps = np.concatenate([r.steps for r in ordered]) if ordered else np.zeros(0, dtype=np.int64)
    states = np.vstack([r.states.reshape(-1, width) for r in ordered]) if ordered else np.zeros((0, width))
    frames = [_actions_frame(r.actions, r.spec.index) for r in ordered]
    actions = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=ACTION_COLUMNS)
    diag_rows = [dict(segment=r.spec.index, **d) for r in ordered for d in r.diagnostics]
    diagnostics = pd.DataFrame(diag_rows)
    ess = pd.DataFrame([dict(segment=r.spec.index, **e) for r in ordered for e in r.ess])
    entries = {}
    for r in ordered:
        if r.entry is not None and len(r.steps):
            entries[int(r.steps[0])] = r.entry
    segs = [{"index": r.spec.index, "t0": r.spec.t0, "t1": r.spec.t1,
             "initialization": r.spec.initialization.value, "warm_in_steps": r.spec.warm_in_steps,
             "recorded": int(len(r.steps)), "complete": r.complete} for r in ordered]
    failures = [r.failure for r in ordered if r.failure is not None]
    start = timestamps[0] if timestamps is not None and len(timestamps) else None
    return AnnualResultStore(model, resolution, steps, states, actions, diagnostics, ess, segs, entries,
                             failures, start)


def make_plan(n_steps: int, resolution: int, mode: str = "parallel", workers: int = 1,
              warm_in_steps: int = 12, start: int = 0) -> RunPlan:
    return RunPlan(tuple(partition(n_steps, resolution, warm_in_steps, mode, start)), workers, mode)
