"""
Rule-based virtual operator.

After every power-flow solve the operator walks a fixed sequence:
supply-demand balance, deviation of units from optimal operation (DGUOO),
AGC reserve with its corrective hierarchy, then voltage control (low-class
buses through fictitious sources and discrete shunts/taps, then the EHV
ladder). Every discrete action is appended to the step context's log with
the rule that fired it.

Cooldown semantics: a device acted on at step ``t0`` because of a violation
in direction ``d0`` may act again before ``t0 + switching_cooldown`` only
when the new trigger direction differs from ``d0``. Within the same step it
may keep acting in direction ``d0`` but never reverse.
"""

from __future__ import annotations

import dataclasses
import enum
import itertools
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import brentq

from aqsts.network import DemandKind, GeneratorKind, IntertieDirection, NetworkModel, ShuntKind
from aqsts.powerflow import NonConvergence, branch_flows
from aqsts.state import NEVER, GridSolver, SystemState, device_slot

RAISE, LOWER = 1, -1


class ActionKind(str, enum.Enum):
    GEN_REDISPATCH = "gen_redispatch"
    GEN_START = "gen_start"
    GEN_STOP = "gen_stop"
    TAP_STEP = "tap_step"
    SHUNT_SWITCH = "shunt_switch"
    LINE_DISCONNECT = "line_disconnect"
    LINE_RECONNECT = "line_reconnect"
    COMPENSATOR_SETPOINT = "compensator_setpoint"
    VOLTAGE_REDUCTION = "voltage_reduction"
    DEMAND_ACTIVATION = "demand_activation"
    INTERTIE_ADJUST = "intertie_adjust"


class Stage(enum.IntEnum):
    SCHEDULE = 0
    BALANCE = 1
    DGUOO = 2
    RESERVES = 3
    VOLTAGE = 4


@dataclasses.dataclass(frozen=True)
class OperatorThresholds:
    balance_threshold: float = 20.0
    balance_tolerance: float = 1e-6
    balance_max_iterations: int = 25
    dguoo_band: float = 100.0
    agc_reserve_min: float = 300.0
    reserve_release_margin: float = 200.0
    low_deadband: float = 0.02
    high_deadband: float = 0.0
    switching_cooldown: int = 3
    voltage_reduction_block: float = 0.02
    setpoint_step: float = 0.01
    setpoint_range: float = 0.05
    line_loading_margin: float = 0.5
    voltage_passes: int = 4

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if f.name == "high_deadband":
                if self.high_deadband < 0:
                    raise ValueError("high_deadband must be >= 0")
            elif getattr(self, f.name) <= 0:
                raise ValueError(f"{f.name} must be positive")


@dataclasses.dataclass(frozen=True)
class OperatorAction:
    time_index: int
    kind: ActionKind
    device: str
    before: float
    after: float
    trigger: str
    stage: Stage = Stage.BALANCE
    sub_step: int = 0


@dataclasses.dataclass(frozen=True)
class FictitiousGenerator:
    bus: str
    held_voltage: float
    injected_q: float


class ReserveShortfall(Exception):
    def __init__(self, remaining: float):
        super().__init__(f"AGC reserve short by {remaining:.3f} MW after all corrective stages")
        self.remaining = remaining


class UnresolvedVoltage(Exception):
    def __init__(self, bus: str, residual: float):
        super().__init__(f"voltage at {bus} unresolved, residual {residual:+.4f} pu")
        self.bus = bus
        self.residual = residual


@dataclasses.dataclass
class StepContext:
    """Per-step scratch shared by the operator stages."""

    t: int
    resolution: int
    gen_p_start: np.ndarray | None
    sub_step: int = 0
    actions: list[OperatorAction] = dataclasses.field(default_factory=list)
    diagnostics: list[dict] = dataclasses.field(default_factory=list)
    concessions: list[str] = dataclasses.field(default_factory=list)
    escalated: float = 0.0
    vr_blocks: int = 0

    def log(self, kind: ActionKind, device: str, before: float, after: float, trigger: str, stage: Stage) -> None:
        self.actions.append(OperatorAction(self.t, kind, device, float(before), float(after), trigger,
                                           stage, self.sub_step))

    def note(self, **record) -> None:
        self.diagnostics.append({"step": self.t, "sub_step": self.sub_step, **record})


# -- arithmetic helpers (pure) ----------------------------------------------------------

def allocate_imbalance(amount: float, margins: Sequence[float], ramp_caps: Sequence[float]) -> tuple[np.ndarray, float]:
    """Split ``amount`` (>= 0) over units proportionally to their margins.

    Each unit is capped at ``min(margin, ramp_cap)``; whatever capped units
    cannot take is re-offered to the others in proportion to their margins.
    Returns the allocations and the unallocated remainder.
    """
    margins = np.maximum(np.asarray(margins, dtype=float), 0.0)
    caps = np.minimum(margins, np.maximum(np.asarray(ramp_caps, dtype=float), 0.0))
    alloc = np.zeros_like(margins)
    left = float(amount)
    free = caps > 0
    while left > 1e-12 and free.any():
        share = left * margins[free] / margins[free].sum()
        room = caps[free] - alloc[free]
        take = np.minimum(share, room)
        alloc[free] += take
        left -= float(take.sum())
        free = free & (alloc < caps - 1e-12)
        if np.all(take >= share - 1e-15):
            break
    return alloc, (left if left > 1e-9 else 0.0)


def agc_reserve(model: NetworkModel, gen_p: np.ndarray, committed: np.ndarray) -> float:
    """Spinning AGC reserve in MW over committed participants."""
    total = 0.0
    for k, g in enumerate(model.generators):
        if g.agc_participant and committed[k]:
            total += max(g.p_max - gen_p[k], 0.0)
    return total


def equalize_deviation(total: float, optimal: np.ndarray, p_min: np.ndarray, p_max: np.ndarray) -> np.ndarray:
    """Dispatch summing to ``total`` with one common deviation from optimal, clipped to limits."""
    optimal, p_min, p_max = (np.asarray(a, dtype=float) for a in (optimal, p_min, p_max))
    lo, hi = float(p_min.sum()), float(p_max.sum())
    if total <= lo:
        return p_min.copy()
    if total >= hi:
        return p_max.copy()

    def gap(delta: float) -> float:
        return float(np.clip(optimal + delta, p_min, p_max).sum()) - total

    a = float(np.min(p_min - optimal)) - 1.0
    b = float(np.max(p_max - optimal)) + 1.0
    delta = brentq(gap, a, b, xtol=1e-12, rtol=1e-15)
    return np.clip(optimal + delta, p_min, p_max)


def best_shunt_combination(q_needed: float, shunts: Sequence[tuple[str, float, int, int, int]],
                           voltage: float) -> tuple[dict[str, int], float]:
    """Pick shunt step counts whose added MVAr is closest to ``q_needed``.

    ``shunts`` rows are ``(id, signed_step_mvar, current, lowest, highest)``.
    Ties prefer fewer switched steps, then the lexicographically smallest
    change vector ordered by id. Returns the new step counts and the
    delivered MVAr at ``voltage``.
    """
    rows = sorted(shunts)
    ranges = [range(lo, hi + 1) for _, _, _, lo, hi in rows]
    best = None
    for combo in itertools.product(*ranges):
        delivered = sum((n - cur) * step for n, (_, step, cur, _, _) in zip(combo, rows)) * voltage**2
        moves = sum(abs(n - cur) for n, (_, _, cur, _, _) in zip(combo, rows))
        key = (round(abs(q_needed - delivered), 9), moves, tuple(n - cur for n, (_, _, cur, _, _) in zip(combo, rows)))
        if best is None or key < best[0]:
            best = (key, combo, delivered)
    if best is None:
        return {}, 0.0
    return {r[0]: n for r, n in zip(rows, best[1])}, float(best[2])


# -- the operator --------------------------------------------------------------------

class VirtualOperator:
    def __init__(self, model: NetworkModel, thresholds: OperatorThresholds, solver: GridSolver, resolution: int):
        self.model = model
        self.thr = thresholds
        self.solver = solver
        self.resolution = resolution
        lay = model.layout
        self.lay = lay
        gens = model.generators
        self.p_min = np.array([g.p_min for g in gens])
        self.p_max = np.array([g.p_max for g in gens])
        self.opt = np.array([g.optimal_dispatch for g in gens])
        self.ramp_up = np.array([g.ramp_up for g in gens]) * resolution
        self.ramp_down = np.array([g.ramp_down for g in gens]) * resolution
        slack = solver.slack_gen
        self.agc = np.array([g.agc_participant and k != slack for k, g in enumerate(gens)], dtype=bool)
        self.priority = [(g.startup_priority, g.id, k) for k, g in enumerate(gens)]
        self.compensators = [k for k, g in enumerate(gens) if g.kind is GeneratorKind.COMPENSATOR]
        self.bus_target = np.array([1.0 if b.voltage_target is None else b.voltage_target for b in model.buses])
        self.base_v_set = lay.v_target.copy()
        # adjacency over every branch regardless of status (for device search)
        self.neighbours: list[set[int]] = [set() for _ in range(lay.n_bus)]
        for f, t in itertools.chain(zip(lay.br_f, lay.br_t), zip(lay.tr_f, lay.tr_t)):
            self.neighbours[f].add(int(t))
            self.neighbours[t].add(int(f))

    # -- shared plumbing ----------------------------------------------------------------

    def solve(self, s: SystemState, fictitious=None) -> SystemState:
        return self.solver.solve(s, fictitious)[0]

    def try_solve(self, s: SystemState) -> SystemState | None:
        try:
            return self.solve(s)
        except NonConvergence:
            return None

    def allowed(self, s: SystemState, slot: int, t: int, trigger: int) -> bool:
        last = int(s.last_switch[slot])
        if last == NEVER:
            return True
        dt = t - last
        if dt == 0:
            return int(s.last_dir[slot]) == trigger
        if dt < self.thr.switching_cooldown:
            return int(s.last_dir[slot]) != trigger
        return True

    @staticmethod
    def mark(s: SystemState, slot: int, t: int, trigger: int) -> None:
        s.last_switch[slot] = t
        s.last_dir[slot] = trigger

    def reserve(self, s: SystemState) -> float:
        return agc_reserve(self.model, s.gen_p, s.committed)

    # -- full sequence ----------------------------------------------------------------------

    def resolve(self, s: SystemState, ctx: StepContext) -> SystemState:
        """Balance, DGUOO, reserves and voltage control on a solved state."""
        ctx.escalated = 0.0
        s = self.restore_balance(s, ctx)
        s = self.enforce_dguoo(s, ctx)
        s = self.corrective_hierarchy(s, ctx)
        s = self.control_voltage_low(s, ctx)
        s = self.control_voltage_high(s, ctx)
        return s

    # -- supply-demand balance ------------------------------------------------------------

    def restore_balance(self, s: SystemState, ctx: StepContext, force: bool = False) -> SystemState:
        """Move AGC units until the swing residual is (numerically) zero.

        Only triggered when the residual exceeds ``balance_threshold`` unless
        ``force``. An unallocatable deficit is left in ``ctx.escalated``.
        """
        thr = self.thr
        r0 = r = s.swing_residual
        if abs(r) <= (thr.balance_tolerance if force else thr.balance_threshold):
            return s
        units = np.flatnonzero(self.agc & s.committed)
        before = float(s.gen_p[units].sum())
        gain = 1.0
        remainder = 0.0
        for _ in range(thr.balance_max_iterations):
            r = s.swing_residual
            if abs(r) <= thr.balance_tolerance or units.size == 0:
                break
            amount = r * gain
            p = s.gen_p[units]
            # no ramp limits while building the initial state
            start = p if ctx.gen_p_start is None else ctx.gen_p_start[units]
            free = np.full(units.size, np.inf) if ctx.gen_p_start is None else None
            if amount > 0:
                alloc, remainder = allocate_imbalance(amount, self.p_max[units] - p,
                                                      free if free is not None else self.ramp_up[units] - (p - start))
                move = alloc
            else:
                alloc, remainder = allocate_imbalance(-amount, p - self.p_min[units],
                                                      free if free is not None else self.ramp_down[units] - (start - p))
                move = -alloc
            applied = float(move.sum())
            if applied == 0.0:
                break
            trial = s.copy()
            trial.gen_p[units] = p + move
            trial = self.solve(trial)
            # secant estimate of incremental losses keeps the loop to a few solves
            observed = r - trial.swing_residual
            if observed != 0.0 and remainder == 0.0:
                ratio = applied / observed
                if 0.5 < ratio < 2.0:
                    gain = ratio
            s = trial
            if remainder > 0.0:
                break
        after = float(s.gen_p[units].sum())
        if after != before:
            ctx.log(ActionKind.GEN_REDISPATCH, "agc_fleet", before, after,
                    f"swing residual {r0:+.3f} MW", Stage.BALANCE)
        if abs(s.swing_residual) > thr.balance_threshold:
            ctx.escalated = max(s.swing_residual, 0.0)
            if s.swing_residual < 0:
                ctx.note(kind="balance_surplus", value=float(s.swing_residual))
        return s

    # -- DGUOO ------------------------------------------------------------------------------

    def dguoo(self, s: SystemState) -> np.ndarray:
        return np.where(self.agc & s.committed, s.gen_p - self.opt, 0.0)

    def _redistribute(self, s: SystemState, total: float) -> None:
        units = np.flatnonzero(self.agc & s.committed)
        if units.size:
            s.gen_p[units] = equalize_deviation(total, self.opt[units], self.p_min[units], self.p_max[units])

    def _idle_by_priority(self, s: SystemState) -> list[int]:
        return [k for _, _, k in sorted(self.priority) if self.agc[k] and not s.committed[k]]

    def _start(self, s: SystemState, k: int, ctx: StepContext, trigger: str, stage: Stage) -> None:
        s.committed[k] = True
        s.gen_p[k] = self.opt[k]
        self.mark(s, device_slot(self.model, "gen", k), ctx.t, RAISE)
        ctx.log(ActionKind.GEN_START, self.model.generators[k].id, 0.0, 1.0, trigger, stage)

    def enforce_dguoo(self, s: SystemState, ctx: StepContext) -> SystemState:
        band = self.thr.dguoo_band
        changed = False
        for _ in range(len(self.model.generators)):
            dev = self.dguoo(s)
            units = np.flatnonzero(self.agc & s.committed)
            total = float(s.gen_p[units].sum())
            if dev.max(initial=0.0) > band:
                idle = [k for k in self._idle_by_priority(s)
                        if self.allowed(s, device_slot(self.model, "gen", k), ctx.t, RAISE)]
                if not idle:
                    ctx.note(kind="dguoo_exhausted", value=float(dev.max()))
                    break
                self._start(s, idle[0], ctx, f"dguoo {dev.max():+.1f} MW above band", Stage.DGUOO)
                self._redistribute(s, total)
                changed = True
            elif dev.min(initial=0.0) < -band:
                running = [k for _, _, k in sorted(self.priority, reverse=True) if self.agc[k] and s.committed[k]]
                stop = None
                for k in running:
                    rest = [j for j in units if j != k]
                    if not rest or self.p_max[rest].sum() < total or self.p_min[rest].sum() > total:
                        continue
                    if self.p_max[rest].sum() - total < self.thr.agc_reserve_min:
                        continue
                    if self.allowed(s, device_slot(self.model, "gen", k), ctx.t, LOWER):
                        stop = k
                        break
                if stop is None:
                    ctx.note(kind="dguoo_exhausted", value=float(dev.min()))
                    break
                s.committed[stop] = False
                before = s.gen_p[stop]
                s.gen_p[stop] = 0.0
                s.gen_q[stop] = 0.0
                self.mark(s, device_slot(self.model, "gen", stop), ctx.t, LOWER)
                ctx.log(ActionKind.GEN_STOP, self.model.generators[stop].id, 1.0, 0.0,
                        f"dguoo {dev.min():+.1f} MW below band (was {before:.1f} MW)", Stage.DGUOO)
                self._redistribute(s, total)
                changed = True
            else:
                break
        if changed:
            s = self.solve(s)
            s = self.restore_balance(s, ctx, force=True)
        return s

    # -- reserves ---------------------------------------------------------------------------

    def corrective_hierarchy(self, s: SystemState, ctx: StepContext) -> SystemState:
        """Stages: unit starts, voltage reduction, interruptible demand, intertie schedules."""
        thr = self.thr

        def need(state: SystemState) -> float:
            return max(thr.agc_reserve_min - self.reserve(state), ctx.escalated, 0.0)

        if need(s) <= 1e-9:
            return self._release(s, ctx)

        # stage 1: unit start-ups
        for k in self._idle_by_priority(s):
            if need(s) <= 1e-9:
                return s
            if not self.allowed(s, device_slot(self.model, "gen", k), ctx.t, RAISE):
                continue
            s = s.copy()
            self._start(s, k, ctx, f"reserve short {need(s):.1f} MW", Stage.RESERVES)
            s = self._rebalanced(s, ctx)
        if need(s) <= 1e-9:
            return s

        # stage 2: one voltage-reduction block per step
        for d, dr in enumerate(self.model.demand_resources):
            if need(s) <= 1e-9 or ctx.vr_blocks >= 1:
                break
            if dr.kind is not DemandKind.VOLTAGE_REDUCTION or s.dr_active[d]:
                continue
            s = s.copy()
            self._activate(s, d, ctx, f"reserve short {need(s):.1f} MW")
            bus = self.model.bus_index[dr.bus]
            old = self.low_target(s, bus)
            s.v_set[bus] = old - thr.voltage_reduction_block
            ctx.log(ActionKind.VOLTAGE_REDUCTION, dr.bus, old, s.v_set[bus], f"reserve short via {dr.id}", Stage.RESERVES)
            ctx.vr_blocks += 1
            s = self._rebalanced(s, ctx)
        if need(s) <= 1e-9:
            return s

        # stage 3: interruptible demand, honouring activation delays
        pending = sum(dr.capacity for d, dr in enumerate(self.model.demand_resources)
                      if s.dr_requested[d] != NEVER and not s.dr_active[d])
        for d, dr in enumerate(self.model.demand_resources):
            if need(s) - pending <= 1e-9:
                break
            if dr.kind is not DemandKind.INTERRUPTIBLE or s.dr_active[d] or s.dr_requested[d] != NEVER:
                continue
            s = s.copy()
            if dr.activation_delay == 0:
                self._activate(s, d, ctx, f"reserve short {need(s):.1f} MW")
                s = self._rebalanced(s, ctx)
            else:
                s.dr_requested[d] = ctx.t
                pending += dr.capacity
                ctx.note(kind="demand_requested", device=dr.id, value=float(ctx.t + dr.activation_delay))
        if need(s) <= 1e-9:
            return s

        # stage 4: intertie schedules within limits
        for i, tie in enumerate(self.model.interties):
            short = need(s)
            if short <= 1e-9:
                break
            cur = s.tie_sched[i]
            if tie.direction is IntertieDirection.IMPORT:
                new = min(cur + short, tie.schedule_limit_max)
            else:
                new = max(cur - short, tie.schedule_limit_min)
            if new == cur:
                continue
            s = s.copy()
            s.tie_sched[i] = new
            s.tie_offset[i] += new - cur
            ctx.log(ActionKind.INTERTIE_ADJUST, tie.id, cur, new, f"reserve short {short:.1f} MW", Stage.RESERVES)
            s = self._rebalanced(s, ctx)

        remaining = need(s)
        if remaining > 1e-6:
            exc = ReserveShortfall(remaining)
            ctx.concessions.append(str(exc))
            ctx.note(kind="reserve_shortfall", value=remaining)
        return s

    def _activate(self, s: SystemState, d: int, ctx: StepContext, trigger: str) -> None:
        dr = self.model.demand_resources[d]
        s.dr_active[d] = True
        s.dr_since[d] = ctx.t
        s.dr_requested[d] = NEVER
        ctx.log(ActionKind.DEMAND_ACTIVATION, dr.id, 0.0, dr.capacity, trigger, Stage.RESERVES)

    def _rebalanced(self, s: SystemState, ctx: StepContext) -> SystemState:
        s = self.solve(s)
        ctx.escalated = 0.0
        return self.restore_balance(s, ctx, force=True)

    def _release(self, s: SystemState, ctx: StepContext) -> SystemState:
        """Undo one corrective measure per call when reserve is comfortably high."""
        thr = self.thr
        spare = self.reserve(s) - thr.agc_reserve_min - thr.reserve_release_margin
        if spare <= 0:
            return s
        for i in reversed(range(len(self.model.interties))):
            off = s.tie_offset[i]
            if off == 0.0:
                continue
            back = float(np.sign(off)) * min(abs(off), spare)
            s = s.copy()
            cur = s.tie_sched[i]
            s.tie_sched[i] = cur - back
            s.tie_offset[i] = off - back
            ctx.log(ActionKind.INTERTIE_ADJUST, self.model.interties[i].id, cur, s.tie_sched[i],
                    "reserve restored", Stage.RESERVES)
            return self._rebalanced(s, ctx)
        for d in reversed(range(len(self.model.demand_resources))):
            dr = self.model.demand_resources[d]
            if not s.dr_active[d] or dr.capacity > spare:
                continue
            s = s.copy()
            self.release_demand(s, d, ctx, "reserve restored")
            return self._rebalanced(s, ctx)
        return s

    def release_demand(self, s: SystemState, d: int, ctx: StepContext, trigger: str) -> None:
        dr = self.model.demand_resources[d]
        s.dr_active[d] = False
        s.dr_since[d] = NEVER
        stage = Stage.SCHEDULE if trigger.startswith("max_duration") else Stage.RESERVES
        ctx.log(ActionKind.DEMAND_ACTIVATION, dr.id, dr.capacity, 0.0, trigger, stage)
        if dr.kind is DemandKind.VOLTAGE_REDUCTION:
            bus = self.model.bus_index[dr.bus]
            old = s.v_set[bus]
            s.v_set[bus] = self.base_v_set[bus]
            ctx.log(ActionKind.VOLTAGE_REDUCTION, dr.bus, old, self.low_target(s, bus), trigger, stage)

    def demand_schedule(self, s: SystemState, ctx: StepContext) -> SystemState:
        """Start-of-step timing: due activations and expiring interruptions."""
        for d, dr in enumerate(self.model.demand_resources):
            if s.dr_requested[d] != NEVER and ctx.t - s.dr_requested[d] >= dr.activation_delay:
                s.dr_active[d] = True
                s.dr_since[d] = ctx.t
                s.dr_requested[d] = NEVER
                ctx.log(ActionKind.DEMAND_ACTIVATION, dr.id, 0.0, dr.capacity, "activation delay elapsed", Stage.SCHEDULE)
            elif s.dr_active[d] and s.dr_since[d] != NEVER and ctx.t - s.dr_since[d] >= dr.max_duration:
                self.release_demand(s, d, ctx, "max_duration reached")
        return s

    # -- voltage: low class ---------------------------------------------------------------

    def low_target(self, s: SystemState, bus: int) -> float:
        v = s.v_set[bus]
        return float(v) if np.isfinite(v) else float(self.bus_target[bus])

    def _low_violations(self, s: SystemState) -> list[int]:
        db = self.thr.low_deadband
        return [i for i in np.flatnonzero(self.lay.is_low)
                if abs(s.vm[i] - self.low_target(s, i)) > db + 1e-12]

    def _shunts_at(self, buses: Iterable[int]) -> list[int]:
        wanted = set(buses)
        return [k for k in range(len(self.model.shunts)) if self.lay.sh_bus[k] in wanted]

    def _regulating_tap(self, bus: int) -> int | None:
        bid = self.model.buses[bus].id
        for k, tr in enumerate(self.model.transformers):
            if tr.regulated_bus == bid:
                return k
        return None

    def control_voltage_low(self, s: SystemState, ctx: StepContext) -> SystemState:
        """Fictitious source per violating bus, discretized into shunts, then taps."""
        model, thr = self.model, self.thr
        for _ in range(thr.voltage_passes):
            buses = self._low_violations(s)
            if not buses:
                return s
            targets = {b: self.low_target(s, b) for b in buses}
            try:
                fict_state, res = self.solver.solve(s, targets)
            except NonConvergence:
                ctx.note(kind="fictitious_solve_failed", value=float(len(buses)))
                break
            s = s.copy()
            switched = False
            for b in buses:
                need = res.fictitious_q.get(b, 0.0)
                direction = RAISE if need > 0 else LOWER
                rows = []
                for k in self._shunts_at([b]):
                    sh = model.shunts[k]
                    cur = int(s.shunt_steps[k])
                    lo, hi = cur, cur
                    if self.allowed(s, device_slot(model, "shunt", k), ctx.t, direction):
                        lo, hi = 0, sh.steps_total
                    rows.append((sh.id, sh.sign * sh.step_mvar, cur, lo, hi))
                combo, delivered = best_shunt_combination(need, rows, targets[b])
                ctx.note(kind="fictitious", device=model.buses[b].id, value=need,
                         delivered=delivered, residual=need - delivered, held_voltage=targets[b])
                for k in self._shunts_at([b]):
                    sh = model.shunts[k]
                    new = combo.get(sh.id, int(s.shunt_steps[k]))
                    if new != s.shunt_steps[k]:
                        ctx.log(ActionKind.SHUNT_SWITCH, sh.id, s.shunt_steps[k], new,
                                f"{model.buses[b].id} {'under' if direction == RAISE else 'over'}voltage", Stage.VOLTAGE)
                        s.shunt_steps[k] = new
                        self.mark(s, device_slot(model, "shunt", k), ctx.t, direction)
                        switched = True
            if switched:
                s = self.solve(s)
            tapped = self._tap_sweep(s, ctx)
            if tapped is not None:
                s = tapped
            elif not switched:
                break
        for b in self._low_violations(s):
            exc = UnresolvedVoltage(model.buses[b].id, float(s.vm[b] - self.low_target(s, b)))
            ctx.concessions.append(str(exc))
        return s

    def _tap_sweep(self, s: SystemState, ctx: StepContext) -> SystemState | None:
        """Step regulating taps one position at a time toward their targets."""
        model = self.model
        moved = False
        for b in self._low_violations(s):
            k = self._regulating_tap(b)
            if k is None:
                continue
            tr = model.transformers[k]
            lo, hi = tr.position_bounds
            direction = RAISE if s.vm[b] < self.low_target(s, b) else LOWER
            # lowering the from-side ratio raises the to-side voltage
            delta = -direction if model.bus_index[tr.to_bus] == b else direction
            slot = device_slot(model, "tap", k)
            while abs(s.vm[b] - self.low_target(s, b)) > self.thr.low_deadband + 1e-12:
                pos = int(s.taps[k]) + delta
                if not lo <= pos <= hi or not self.allowed(s, slot, ctx.t, direction):
                    break
                trial = s.copy()
                trial.taps[k] = pos
                trial = self.try_solve(trial)
                if trial is None:
                    break
                ctx.log(ActionKind.TAP_STEP, tr.id, s.taps[k], pos,
                        f"{model.buses[b].id} {'under' if direction == RAISE else 'over'}voltage", Stage.VOLTAGE)
                self.mark(trial, slot, ctx.t, direction)
                s = trial
                moved = True
        return s if moved else None

    # -- voltage: EHV ladder ------------------------------------------------------------

    def _high_violation(self, s: SystemState, skip: set = frozenset()) -> tuple[int, int] | None:
        db = self.thr.high_deadband
        worst, pick = 1e-12, None
        for i in np.flatnonzero(~self.lay.is_low):
            if int(i) in skip:
                continue
            over = s.vm[i] - (self.lay.v_max[i] - db)
            under = (self.lay.v_min[i] + db) - s.vm[i]
            if over > worst:
                worst, pick = over, (int(i), LOWER)
            if under > worst:
                worst, pick = under, (int(i), RAISE)
        return pick

    def _excess(self, s: SystemState, bus: int, direction: int) -> float:
        db = self.thr.high_deadband
        if direction == LOWER:
            return float(s.vm[bus] - (self.lay.v_max[bus] - db))
        return float((self.lay.v_min[bus] + db) - s.vm[bus])

    def _loading(self, s: SystemState) -> np.ndarray:
        sf, st, _, _ = branch_flows(self.model, s.vm, s.va, s.branch_status, s.taps)
        return np.maximum(np.abs(sf), np.abs(st)) * self.model.system_base_mva / self.lay.br_limit

    def _thermal_set(self, s: SystemState) -> set[int]:
        return set(np.flatnonzero(self._loading(s) > 1.0 + 1e-9).tolist())

    def _candidates(self, s: SystemState, bus: int, direction: int):
        """Remedies in ladder order as (kind, index, new value) tuples."""
        model, lay = self.model, self.lay
        near = [bus] + sorted(self.neighbours[bus])
        shunt_moves = []
        for b in near:
            for k in self._shunts_at([b]):
                sh = model.shunts[k]
                cur = int(s.shunt_steps[k])
                absorbs = sh.kind is ShuntKind.REACTOR
                if direction == LOWER:
                    new = cur + 1 if absorbs else cur - 1
                else:
                    new = cur - 1 if absorbs else cur + 1
                if 0 <= new <= sh.steps_total:
                    # reactors first when lowering, capacitors first when raising
                    first = absorbs if direction == LOWER else not absorbs
                    shunt_moves.append((0 if b == bus else 1, 0 if first else 1, sh.id, k, new))
        line_moves = []
        for k, br in enumerate(model.branches):
            if not br.switchable or bus not in (lay.br_f[k], lay.br_t[k]):
                continue
            on = bool(s.branch_status[k])
            if direction == LOWER and on:
                line_moves.append(("line", k, False))
            elif direction == RAISE and not on:
                line_moves.append(("line", k, True))
        comp = []
        for k in self.compensators:
            if s.committed[k] and lay.gen_bus[k] in near:
                gb = int(lay.gen_bus[k])
                comp.append((0 if gb == bus else 1, model.generators[k].id, gb))
        setpoints = [("setpoint", gb, None) for _, _, gb in sorted(comp)]
        shunts = [("shunt", k, new) for *_, k, new in sorted(shunt_moves)]
        if direction == LOWER:
            return shunts + line_moves + setpoints
        return line_moves + shunts + setpoints

    def _apply_remedy(self, s: SystemState, remedy, direction: int, ctx: StepContext, trigger: str):
        """Return (trial state, action args) or None when the remedy is not applicable."""
        model, thr = self.model, self.thr
        kind, idx, value = remedy
        trial = s.copy()
        if kind == "shunt":
            slot = device_slot(model, "shunt", idx)
            if not self.allowed(s, slot, ctx.t, direction):
                return None
            trial.shunt_steps[idx] = value
            act = (ActionKind.SHUNT_SWITCH, model.shunts[idx].id, s.shunt_steps[idx], value)
        elif kind == "line":
            slot = device_slot(model, "line", idx)
            if not self.allowed(s, slot, ctx.t, direction):
                return None
            if not value:
                if self._loading(s)[idx] >= thr.line_loading_margin:
                    return None
                status = trial.branch_status.copy()
                status[idx] = False
                n_before, _ = self.lay.islands(s.branch_status)
                n_after, _ = self.lay.islands(status)
                if n_after != n_before:
                    return None
            trial.branch_status[idx] = value
            act = (ActionKind.LINE_RECONNECT if value else ActionKind.LINE_DISCONNECT,
                   model.branches[idx].id, float(not value), float(value))
        else:
            slot = device_slot(model, "setpoint", idx)
            if not self.allowed(s, slot, ctx.t, direction):
                return None
            base = self.bus_target[idx]
            old = s.v_set[idx]
            new = round(float(old + direction * thr.setpoint_step), 6)
            bus = model.buses[idx]
            if not (base - thr.setpoint_range - 1e-9 <= new <= base + thr.setpoint_range + 1e-9) or not bus.v_min < new <= bus.v_max:
                return None
            trial.v_set[idx] = new
            act = (ActionKind.COMPENSATOR_SETPOINT, bus.id, old, new)
        solved = self.try_solve(trial)
        if solved is None:
            return None
        self.mark(solved, slot, ctx.t, direction)
        return solved, act

    def control_voltage_high(self, s: SystemState, ctx: StepContext) -> SystemState:
        model = self.model
        stuck: set[int] = set()
        for _ in range(4 * self.thr.voltage_passes):
            viol = self._high_violation(s, stuck)
            if viol is None:
                break
            bus, direction = viol
            before = self._excess(s, bus, direction)
            thermal = self._thermal_set(s)
            trigger = f"{model.buses[bus].id} {'over' if direction == LOWER else 'under'}voltage {s.vm[bus]:.4f} pu"
            for remedy in self._candidates(s, bus, direction):
                got = self._apply_remedy(s, remedy, direction, ctx, trigger)
                if got is None:
                    continue
                trial, act = got
                if self._excess(trial, bus, direction) >= before - 1e-6:
                    continue
                if remedy[0] == "line" and not self._thermal_set(trial) <= thermal:
                    continue
                ctx.log(*act, trigger, Stage.VOLTAGE)
                s = trial
                break
            else:
                stuck.add(bus)
        remaining: set[int] = set()
        while (viol := self._high_violation(s, remaining)) is not None:
            bus, direction = viol
            remaining.add(bus)
            exc = UnresolvedVoltage(model.buses[bus].id, -direction * self._excess(s, bus, direction))
            ctx.concessions.append(str(exc))
        return s
