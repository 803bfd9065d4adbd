"""
Chained quasi-static time stepping.

Each step moves every profiled injection from its current value to the
profile value of the new step in ``J`` equal increments, solving the power
flow and running the virtual operator after each increment. The final
increment lands exactly on the targets.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Mapping, Sequence

import numpy as np

from aqsts.ess import EssUnit, GenerationLimits, PeakCalendar, step_unit, update_soc
from aqsts.network import GeneratorKind, NetworkModel
from aqsts.operator import (OperatorAction, OperatorThresholds, StepContext, VirtualOperator,
                             equalize_deviation)
from aqsts.powerflow import NonConvergence, PowerFlowSettings, check_security
from aqsts.profiles import MissingProfile, TimeSeriesDataset
from aqsts.state import GridSolver, SystemState


class StepFailure(Exception):
    def __init__(self, t: int, sub_step: int, trace: Sequence = (), reason: str = "power flow failed"):
        super().__init__(f"step {t} sub-step {sub_step}: {reason}")
        self.t = t
        self.sub_step = sub_step
        self.trace = list(trace)
        self.reason = reason

    def trace_lines(self) -> list[str]:
        return [rec.as_line() for rec in self.trace]


class InitializationFailure(Exception):
    def __init__(self, message: str, diagnostics: Sequence = ()):
        super().__init__(message)
        self.diagnostics = list(diagnostics)


@dataclasses.dataclass(frozen=True)
class EngineConfig:
    resolution: int = 15
    max_injection_per_substep: float = 100.0
    record_every: int = 1
    init_passes: int = 6

    def __post_init__(self):
        if self.resolution not in (5, 15, 30, 60) and 60 % self.resolution:
            raise ValueError(f"resolution {self.resolution} must divide 60")
        if self.max_injection_per_substep <= 0 or self.record_every < 1:
            raise ValueError("max_injection_per_substep must be > 0 and record_every >= 1")


@dataclasses.dataclass
class EssSettings:
    """Storage controller inputs aligned with the engine's step grid."""

    limits: Mapping[tuple[str, int], GenerationLimits]
    period_of_step: np.ndarray
    peak: PeakCalendar
    soc_balance: float | None = None
    block_all_peak_charging: bool = False
    enabled: bool = True


@dataclasses.dataclass
class StepPlan:
    load_p: np.ndarray
    load_q: np.ndarray
    gen_p: np.ndarray
    gen_q: np.ndarray
    tie: np.ndarray
    ess_p: np.ndarray
    delta_p: np.ndarray   # per bus, MW
    delta_q: np.ndarray   # per bus, MVAr
    sub_steps: int

    @property
    def fractions(self) -> np.ndarray:
        return np.full(self.sub_steps, 1.0 / self.sub_steps)


@dataclasses.dataclass
class StepOutcome:
    state: SystemState
    actions: list[OperatorAction]
    diagnostics: list[dict]
    concessions: list[str]
    ess: list[dict]
    residuals: list[float]


class ProfileTable:
    """Profile values arranged as (step, device) matrices for each device class."""

    def __init__(self, model: NetworkModel, profiles: TimeSeriesDataset):
        self.n = profiles.n_steps
        loads, gens, ties = model.loads, model.generators, model.interties

        def grab(ids, suffix=""):
            out = np.full((self.n, len(ids)), np.nan)
            have = np.zeros(len(ids), dtype=bool)
            for k, i in enumerate(ids):
                col = profiles.series.get(i + suffix)
                if col is not None:
                    out[:, k] = col
                    have[k] = True
            return out, have

        self.load_p, self.has_load_p = grab([ld.id for ld in loads])
        self.load_q, self.has_load_q = grab([ld.id for ld in loads], ".q")
        self.gen_p, self.has_gen_p = grab([g.id for g in gens])
        self.gen_q, self.has_gen_q = grab([g.id for g in gens], ".q")
        self.tie, self.has_tie = grab([t.id for t in ties])
        self.load_ids = [ld.id for ld in loads]
        self.gen_ids = [g.id for g in gens]
        self.tie_ids = [t.id for t in ties]
        self.base_load_p = np.array([ld.p_mw for ld in loads])
        self.base_load_q = np.array([ld.q_mvar for ld in loads])
        # constant power factor when only P is profiled
        self.pf_ratio = np.divide(self.base_load_q, self.base_load_p, out=np.zeros(len(loads)),
                                  where=self.base_load_p != 0)

    def _row(self, matrix: np.ndarray, have: np.ndarray, t: int, ids: list[str]) -> np.ndarray:
        if not 0 <= t < self.n:
            missing = [i for i, h in zip(ids, have) if h]
            if missing:
                raise MissingProfile(missing[0], t)
            return matrix[0] if self.n else np.zeros(len(ids))
        row = matrix[t]
        bad = have & np.isnan(row)
        if bad.any():
            raise MissingProfile(ids[int(np.flatnonzero(bad)[0])], t)
        return row

    def loads_at(self, t: int, current_p: np.ndarray, current_q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p = self._row(self.load_p, self.has_load_p, t, self.load_ids)
        q = self._row(self.load_q, self.has_load_q, t, [i + ".q" for i in self.load_ids])
        p = np.where(self.has_load_p, p, current_p)
        q = np.where(self.has_load_q, q, np.where(self.has_load_p, p * self.pf_ratio, current_q))
        return p, q

    def gens_at(self, t: int, current_p: np.ndarray, current_q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p = self._row(self.gen_p, self.has_gen_p, t, self.gen_ids)
        q = self._row(self.gen_q, self.has_gen_q, t, [i + ".q" for i in self.gen_ids])
        return np.where(self.has_gen_p, p, current_p), np.where(self.has_gen_q, q, current_q)

    def ties_at(self, t: int, current: np.ndarray) -> np.ndarray:
        return np.where(self.has_tie, self._row(self.tie, self.has_tie, t, self.tie_ids), current)


class Engine:
    """One engine per segment; holds no state between steps other than caches."""

    def __init__(self, model: NetworkModel, profiles: TimeSeriesDataset, config: EngineConfig = EngineConfig(),
                 thresholds: OperatorThresholds = OperatorThresholds(),
                 pf_settings: PowerFlowSettings = PowerFlowSettings(), ess: EssSettings | None = None):
        if profiles.resolution != config.resolution:
            profiles = profiles.resample(config.resolution)
        self.model = model
        self.profiles = profiles
        self.config = config
        self.table = ProfileTable(model, profiles)
        self.solver = GridSolver(model, pf_settings)
        self.vo = VirtualOperator(model, thresholds, self.solver, config.resolution)
        self.ess = ess if (ess is not None and ess.enabled and model.ess) else None
        lay = model.layout
        self.lay = lay
        self.steps_per_day = 1440 // config.resolution
        gens = model.generators
        # profiled generators are driven by the plan; the rest belong to the operator
        slack = self.solver.slack_gen
        self.profiled_gen = self.table.has_gen_p & np.array([not g.agc_participant and k != slack
                                                             for k, g in enumerate(gens)], dtype=bool)
        self.profiled_gen_q = self.table.has_gen_q & ~lay.gen_regulating
        zones = sorted({g.zone for g in gens if g.kind is GeneratorKind.WIND and g.zone is not None})
        self.wind_by_zone = {z: np.array([k for k, g in enumerate(gens) if g.kind is GeneratorKind.WIND and g.zone == z])
                             for z in zones}
        self.timestamps = profiles.timestamps()

    @property
    def n_steps(self) -> int:
        return self.table.n

    def timestamp(self, t: int) -> str | None:
        return self.timestamps[t].isoformat() if 0 <= t < len(self.timestamps) else None

    # -- planning ----------------------------------------------------------------------

    def zone_wind(self, t: int) -> dict[str, float]:
        row = self.table._row(self.table.gen_p, self.table.has_gen_p, t, self.table.gen_ids)
        return {z: float(np.sum(row[idx])) if idx.size else 0.0 for z, idx in self.wind_by_zone.items()}

    def plan_step(self, previous: SystemState, t: int, ess_p: np.ndarray | None = None) -> StepPlan:
        """Targets for step ``t`` and the number of equal sub-steps."""
        lay, n = self.lay, self.lay.n_bus
        load_p, load_q = self.table.loads_at(t, previous.load_p, previous.load_q)
        gp, gq = self.table.gens_at(t, previous.gen_p, previous.gen_q)
        gen_p = np.where(self.profiled_gen, gp, previous.gen_p)
        gen_q = np.where(self.profiled_gen_q, gq, previous.gen_q)
        tie = self.table.ties_at(t, previous.tie_sched - previous.tie_offset) + previous.tie_offset
        lo = np.array([x.schedule_limit_min for x in self.model.interties])
        hi = np.array([x.schedule_limit_max for x in self.model.interties])
        tie = np.clip(tie, lo, hi) if tie.size else tie
        ess = previous.ess_p if ess_p is None else np.asarray(ess_p, dtype=float)

        gmask = self.profiled_gen
        dp = (np.bincount(lay.gen_bus, np.where(gmask, gen_p - previous.gen_p, 0.0), n)
              - np.bincount(lay.load_bus, load_p - previous.load_p, n))
        dq = (np.bincount(lay.gen_bus, np.where(self.profiled_gen_q, gen_q - previous.gen_q, 0.0), n)
              - np.bincount(lay.load_bus, load_q - previous.load_q, n))
        if tie.size:
            dp += np.bincount(lay.tie_bus, lay.tie_sign * (tie - previous.tie_sched), n)
        if ess.size:
            dp += np.bincount(lay.ess_bus, ess - previous.ess_p, n)
        biggest = float(np.max(np.abs(dp))) if dp.size else 0.0
        j = max(1, math.ceil(biggest / self.config.max_injection_per_substep - 1e-12))
        return StepPlan(load_p, load_q, gen_p, gen_q, tie, ess, dp, dq, j)

    # -- storage ------------------------------------------------------------------------

    def ess_decisions(self, state: SystemState, t: int) -> tuple[np.ndarray, list[dict]]:
        units: Sequence[EssUnit] = self.model.ess
        if self.ess is None:
            return np.zeros(len(units)), []
        wind = self.zone_wind(t)
        period = int(self.ess.period_of_step[t])
        power = np.zeros(len(units))
        rows = []
        for k, unit in enumerate(units):
            lim = self.ess.limits[(unit.zone, period)]
            gen_t = wind.get(unit.zone, 0.0)
            d = step_unit(unit, gen_t, lim, float(state.soc[k]), t, self.ess.peak, self.config.resolution,
                          self.ess.soc_balance, self.ess.block_all_peak_charging)
            power[k] = d.power
            rows.append({"step": t, "unit": unit.id, "mode": d.mode.value, "power_MW": d.power,
                         "classification": d.classification.value, "branch": d.branch, "capped": d.capped,
                         "zone_generation_MW": gen_t, "period": period,
                         "gen_max_lim": lim.gen_max_lim, "gen_min_lim": lim.gen_min_lim,
                         "in_peak": self.ess.peak.in_peak(t)})
        return power, rows

    # -- stepping -----------------------------------------------------------------------

    def advance(self, previous: SystemState, t: int) -> StepOutcome:
        """Resolve step ``t`` starting from the accepted state of step ``t - 1``."""
        ctx = StepContext(t, self.config.resolution, previous.gen_p.copy())
        s = previous.copy()
        s.time_index = t
        s.timestamp = self.timestamp(t)
        s = self.vo.demand_schedule(s, ctx)
        ess_p, ess_rows = self.ess_decisions(s, t)
        plan = self.plan_step(s, t, ess_p)
        start = (s.load_p.copy(), s.load_q.copy(), s.gen_p.copy(), s.gen_q.copy(), s.tie_sched.copy(), s.ess_p.copy())
        residuals = []
        gmask, qmask = self.profiled_gen, self.profiled_gen_q
        for j in range(1, plan.sub_steps + 1):
            ctx.sub_step = j
            if j == plan.sub_steps:
                s.load_p, s.load_q = plan.load_p.copy(), plan.load_q.copy()
                s.tie_sched, s.ess_p = plan.tie.copy(), plan.ess_p.copy()
                s.gen_p = np.where(gmask, plan.gen_p, s.gen_p)
                s.gen_q = np.where(qmask, plan.gen_q, s.gen_q)
            else:
                f = j / plan.sub_steps
                s.load_p = start[0] + f * (plan.load_p - start[0])
                s.load_q = start[1] + f * (plan.load_q - start[1])
                s.gen_p = np.where(gmask, start[2] + f * (plan.gen_p - start[2]), s.gen_p)
                s.gen_q = np.where(qmask, start[3] + f * (plan.gen_q - start[3]), s.gen_q)
                s.tie_sched = start[4] + f * (plan.tie - start[4])
                s.ess_p = start[5] + f * (plan.ess_p - start[5])
            try:
                s = self.solver.solve(s)[0]
                residuals.append(s.swing_residual)
                s = self.vo.resolve(s, ctx)
            except NonConvergence as exc:
                raise StepFailure(t, j, exc.trace) from exc

        for k, unit in enumerate(self.model.ess):
            upd = update_soc(unit, float(s.ess_p[k]), self.config.resolution, float(s.soc[k]))
            s.soc[k] = upd.soc
            if ess_rows:
                ess_rows[k].update(soc_pct=upd.soc, clipped=upd.clipped)

        violations = check_security(self.model, s.vm, s.va, s.branch_status, s.taps, s.gen_q, s.committed)
        concessions = list(ctx.concessions)
        if violations:
            concessions += [f"{v.kind} {v.element} {v.value:.4f} vs {v.limit:.4f}" for v in violations]
        record = {"step": t, "sub_step": plan.sub_steps, "kind": "step",
                  "value": max((abs(r) for r in residuals), default=0.0)}
        if concessions:
            record["concession"] = "; ".join(concessions)
        ctx.diagnostics.append(record)
        return StepOutcome(s, ctx.actions, ctx.diagnostics, concessions, ess_rows, residuals)

    def replay(self, recorded: SystemState) -> SystemState:
        """Re-solve the step after ``recorded`` (determinism check helper)."""
        return self.advance(recorded, recorded.time_index + 1).state

    # -- initialization ---------------------------------------------------------------

    def initialize(self, at_step: int = 0, base: SystemState | None = None) -> tuple[SystemState, list[OperatorAction]]:
        """Converged, operator-clean state for ``at_step`` from the base configuration."""
        model, vo = self.model, self.vo
        s = SystemState.from_model(model) if base is None else base.copy()
        s.time_index = at_step
        s.timestamp = self.timestamp(at_step)
        s.load_p, s.load_q = self.table.loads_at(at_step, s.load_p, s.load_q)
        gp, gq = self.table.gens_at(at_step, s.gen_p, s.gen_q)
        s.gen_p = np.where(self.profiled_gen, gp, s.gen_p)
        s.gen_q = np.where(self.profiled_gen_q, gq, s.gen_q)
        s.tie_sched = self.table.ties_at(at_step, s.tie_sched)
        s.ess_p = np.zeros(len(model.ess))
        s.v_set = model.layout.v_target.copy()

        # first guess: lossless balance shared with one common deviation
        units = np.flatnonzero(vo.agc & s.committed)
        if units.size:
            fixed = s.copy()
            fixed.gen_p[units] = 0.0
            need = -float(np.sum(self.solver.bus_p_fixed(fixed))) - self.solver.slack_schedule
            s.gen_p[units] = equalize_deviation(need, vo.opt[units], vo.p_min[units], vo.p_max[units])
        try:
            s, res = self.solver.solve(s, flat=True)
        except NonConvergence as exc:
            raise InitializationFailure(f"preliminary power flow failed at step {at_step}",
                                        [r.as_line() for r in exc.trace]) from exc

        ctx = StepContext(at_step, self.config.resolution, None)
        try:
            for _ in range(self.config.init_passes):
                count = len(ctx.actions)
                ctx.concessions.clear()
                s = vo.restore_balance(s, ctx, force=True)
                s = vo.resolve(s, ctx)
                if len(ctx.actions) == count:
                    break
            s, res = self.solver.solve(s)
        except NonConvergence as exc:
            raise InitializationFailure(f"operator pass failed to converge at step {at_step}",
                                        [r.as_line() for r in exc.trace]) from exc

        problems = []
        for b in res.q_limited:
            problems.append(f"voltage target {s.v_set[b]:.4f} pu at {model.buses[b].id} unreachable "
                            f"(reactive limit reached)")
        for v in check_security(model, s.vm, s.va, s.branch_status, s.taps, s.gen_q, s.committed):
            problems.append(f"{v.kind} at {v.element}: {v.value:.4f} vs limit {v.limit:.4f}")
        problems += ctx.concessions
        if problems:
            raise InitializationFailure(f"initial state at step {at_step} is not secure: " + "; ".join(problems), problems)
        return s, ctx.actions


__all__ = ["Engine", "EngineConfig", "EssSettings", "StepPlan", "StepOutcome", "StepFailure",
           "InitializationFailure", "ProfileTable"]
