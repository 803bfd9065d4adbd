"""
Operating state and the state <-> power-flow bridge.

A :class:`SystemState` is one resolved operating point: continuous
variables (voltages, dispatch, SOC) together with every discrete device
setting and the bookkeeping the operator needs to act causally (pending
demand activations, last switching step per device). It is everything
required to advance to the next step, so replaying from a recorded state
is exact.
"""

from __future__ import annotations

import dataclasses
from typing import Mapping

import numpy as np

from aqsts.network import GeneratorKind, NetworkModel
from aqsts.powerflow import (NonConvergence, PowerFlowCase, PowerFlowResult, PowerFlowSettings,
                             branch_losses, solve_with_fallbacks)

NEVER = -(10**9)

_ARRAYS = ("vm", "va", "gen_p", "gen_q", "committed", "taps", "shunt_steps", "branch_status",
           "soc", "ess_p", "load_p", "load_q", "tie_sched", "tie_offset", "dr_active", "dr_requested",
           "dr_since", "v_set", "last_switch", "last_dir")


@dataclasses.dataclass
class SystemState:
    time_index: int
    vm: np.ndarray
    va: np.ndarray
    gen_p: np.ndarray
    gen_q: np.ndarray
    committed: np.ndarray
    taps: np.ndarray
    shunt_steps: np.ndarray
    branch_status: np.ndarray
    soc: np.ndarray
    ess_p: np.ndarray
    load_p: np.ndarray
    load_q: np.ndarray
    tie_sched: np.ndarray
    tie_offset: np.ndarray
    dr_active: np.ndarray
    dr_requested: np.ndarray
    dr_since: np.ndarray
    v_set: np.ndarray
    last_switch: np.ndarray
    last_dir: np.ndarray
    swing_residual: float = 0.0
    timestamp: str | None = None

    def copy(self) -> "SystemState":
        kw = {name: getattr(self, name).copy() for name in _ARRAYS}
        return SystemState(time_index=self.time_index, swing_residual=self.swing_residual,
                           timestamp=self.timestamp, **kw)

    @classmethod
    def from_model(cls, model: NetworkModel) -> "SystemState":
        lay = model.layout
        gens = model.generators
        committed = np.array([g.committed for g in gens], dtype=bool)
        v_set = lay.v_target.copy()
        n_dev = device_count(model)
        return cls(
            time_index=0,
            vm=np.where(np.isnan(v_set), 1.0, v_set),
            va=np.zeros(lay.n_bus),
            gen_p=np.array([g.optimal_dispatch if g.committed else 0.0 for g in gens]),
            gen_q=np.zeros(len(gens)),
            committed=committed,
            taps=np.array([t.tap_position for t in model.transformers], dtype=np.int64),
            shunt_steps=np.array([s.steps_on for s in model.shunts], dtype=np.int64),
            branch_status=np.array([b.in_service for b in model.branches], dtype=bool),
            soc=np.array([e.soc for e in model.ess], dtype=float),
            ess_p=np.zeros(len(model.ess)),
            load_p=np.array([ld.p_mw for ld in model.loads], dtype=float),
            load_q=np.array([ld.q_mvar for ld in model.loads], dtype=float),
            tie_sched=np.array([t.current_schedule for t in model.interties], dtype=float),
            tie_offset=np.zeros(len(model.interties)),
            dr_active=np.array([d.active for d in model.demand_resources], dtype=bool),
            dr_requested=np.full(len(model.demand_resources), NEVER, dtype=np.int64),
            dr_since=np.full(len(model.demand_resources), NEVER, dtype=np.int64),
            v_set=v_set,
            last_switch=np.full(n_dev, NEVER, dtype=np.int64),
            last_dir=np.zeros(n_dev, dtype=np.int64),
        )

    # -- flat vector form (one row of the recorded state matrix) --------------------

    def to_vector(self) -> np.ndarray:
        parts = [np.asarray(getattr(self, name), dtype=float).ravel() for name in _ARRAYS]
        parts.append(np.array([self.swing_residual]))
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, model: NetworkModel, vec: np.ndarray, time_index: int,
                    timestamp: str | None = None) -> "SystemState":
        proto = cls.from_model(model)
        kw = {}
        pos = 0
        for name in _ARRAYS:
            ref = getattr(proto, name)
            chunk = vec[pos:pos + ref.size]
            kw[name] = chunk.astype(ref.dtype) if ref.dtype != float else chunk.copy()
            pos += ref.size
        return cls(time_index=time_index, swing_residual=float(vec[pos]), timestamp=timestamp, **kw)

    def same_as(self, other: "SystemState") -> bool:
        """Bit-for-bit equality of every recorded field."""
        if self.time_index != other.time_index:
            return False
        return self.to_vector().tobytes() == other.to_vector().tobytes()


def device_count(model: NetworkModel) -> int:
    return (len(model.generators) + len(model.transformers) + len(model.shunts)
            + len(model.branches) + len(model.buses))


def device_slot(model: NetworkModel, group: str, k: int) -> int:
    """Index of a switchable device in the cooldown arrays."""
    offsets = {"gen": 0}
    offsets["tap"] = len(model.generators)
    offsets["shunt"] = offsets["tap"] + len(model.transformers)
    offsets["line"] = offsets["shunt"] + len(model.shunts)
    offsets["setpoint"] = offsets["line"] + len(model.branches)
    return offsets[group] + k


def state_columns(model: NetworkModel) -> list[tuple[str, str, str]]:
    """(kind, device, quantity) label for every entry of :meth:`SystemState.to_vector`."""
    bus = [b.id for b in model.buses]
    gen = [g.id for g in model.generators]
    cols: list[tuple[str, str, str]] = []
    cols += [("bus", b, "vm") for b in bus]
    cols += [("bus", b, "va") for b in bus]
    cols += [("generator", g, "p") for g in gen]
    cols += [("generator", g, "q") for g in gen]
    cols += [("generator", g, "committed") for g in gen]
    cols += [("transformer", t.id, "tap") for t in model.transformers]
    cols += [("shunt", s.id, "steps_on") for s in model.shunts]
    cols += [("branch", b.id, "in_service") for b in model.branches]
    cols += [("ess", e.id, "soc") for e in model.ess]
    cols += [("ess", e.id, "p") for e in model.ess]
    cols += [("load", ld.id, "p") for ld in model.loads]
    cols += [("load", ld.id, "q") for ld in model.loads]
    cols += [("intertie", t.id, "schedule") for t in model.interties]
    cols += [("intertie", t.id, "offset") for t in model.interties]
    cols += [("demand_resource", d.id, "active") for d in model.demand_resources]
    cols += [("demand_resource", d.id, "requested") for d in model.demand_resources]
    cols += [("demand_resource", d.id, "since") for d in model.demand_resources]
    cols += [("bus", b, "v_set") for b in bus]
    devices = gen + [t.id for t in model.transformers] + [s.id for s in model.shunts] + [b.id for b in model.branches] + bus
    cols += [("device", d, "last_switch") for d in devices]
    cols += [("device", d, "last_dir") for d in devices]
    cols.append(("system", "swing", "residual"))
    return cols


class GridSolver:
    """Builds power-flow cases from states and writes solutions back."""

    def __init__(self, model: NetworkModel, settings: PowerFlowSettings = PowerFlowSettings()):
        self.model = model
        self.settings = settings
        lay = model.layout
        self.lay = lay
        self.base = model.system_base_mva
        gens = model.generators
        self.gen_wind = np.array([g.kind is GeneratorKind.WIND for g in gens], dtype=bool)
        self.gen_reg = lay.gen_regulating
        slack_gens = [k for k, g in enumerate(gens) if lay.gen_is_slack[k]]
        self.slack_gen = slack_gens[0] if slack_gens else None
        self.slack_bus = int(lay.slack[0]) if len(lay.slack) else None
        self.slack_schedule = gens[self.slack_gen].optimal_dispatch if self.slack_gen is not None else 0.0
        self.dr_capacity = np.array([d.capacity for d in model.demand_resources], dtype=float)
        self.q_range = np.maximum(lay.gen_qmax - lay.gen_qmin, 1e-6)

    # -- injections (MW / MVAr) -----------------------------------------------------------

    def bus_p_fixed(self, s: SystemState, exclude_slack_gen: bool = True) -> np.ndarray:
        """Specified active injection per bus in MW."""
        n = self.lay.n_bus
        gp = np.where(s.committed, s.gen_p, 0.0)
        if exclude_slack_gen and self.slack_gen is not None:
            gp = gp.copy()
            gp[self.slack_gen] = 0.0
        p = np.bincount(self.lay.gen_bus, gp, n) - np.bincount(self.lay.load_bus, s.load_p, n)
        if len(self.lay.ess_bus):
            p += np.bincount(self.lay.ess_bus, s.ess_p, n)
        if len(self.lay.tie_bus):
            p += np.bincount(self.lay.tie_bus, self.lay.tie_sign * s.tie_sched, n)
        if len(self.lay.dr_bus):
            p += np.bincount(self.lay.dr_bus, np.where(s.dr_active, self.dr_capacity, 0.0), n)
        return p

    def bus_q_fixed(self, s: SystemState) -> np.ndarray:
        n = self.lay.n_bus
        gq = np.where(s.committed & ~self.gen_reg, s.gen_q, 0.0)
        return np.bincount(self.lay.gen_bus, gq, n) - np.bincount(self.lay.load_bus, s.load_q, n)

    def case(self, s: SystemState, fictitious: Mapping[int, float] | None = None) -> PowerFlowCase:
        lay = self.lay
        n = lay.n_bus
        base = self.base
        ybus = lay.series_admittance(s.branch_status, s.taps)
        bsh = lay.shunt_susceptance(s.shunt_steps)
        if bsh.any():
            ybus = ybus.copy()
            ybus[np.diag_indices(n)] += 1j * bsh
        p_mw = self.bus_p_fixed(s)
        q_fixed = self.bus_q_fixed(s) / base
        on = s.committed & self.gen_reg
        q_min = np.bincount(lay.gen_bus, np.where(on, lay.gen_qmin, 0.0), n) / base
        q_max = np.bincount(lay.gen_bus, np.where(on, lay.gen_qmax, 0.0), n) / base
        has_reg = np.bincount(lay.gen_bus, on.astype(float), n) > 0
        is_ref = np.zeros(n, dtype=bool)
        is_ref[lay.slack] = True
        v_set = s.v_set.copy()
        is_pv = has_reg & ~is_ref & np.isfinite(v_set)
        if fictitious:
            for bus, target in fictitious.items():
                is_pv[bus] = not is_ref[bus]
                v_set[bus] = target
                q_min[bus] = -np.inf
                q_max[bus] = np.inf
        ref = lay.slack
        pv = np.flatnonzero(is_pv)
        pq = np.flatnonzero(~is_pv & ~is_ref)
        s_spec = p_mw / base + 1j * q_fixed
        return PowerFlowCase(ybus, s_spec, v_set, ref, pv, pq, q_fixed, q_min, q_max)

    # -- solving ----------------------------------------------------------------------

    def solve(self, s: SystemState, fictitious: Mapping[int, float] | None = None,
              flat: bool = False) -> tuple[SystemState, PowerFlowResult]:
        """Solve from the voltages in ``s`` and return the updated copy.

        Raises :class:`NonConvergence` when every fallback rung fails.
        """
        case = self.case(s, fictitious)
        v0 = (np.ones(case.n), np.zeros(case.n)) if flat else (s.vm, s.va)
        res = solve_with_fallbacks(case, v0, self.settings)
        out = s.copy()
        self.apply(out, case, res, fictitious)
        return out, res

    def apply(self, s: SystemState, case: PowerFlowCase, res: PowerFlowResult,
              fictitious: Mapping[int, float] | None = None) -> None:
        lay = self.lay
        base = self.base
        s.vm = res.vm.copy()
        s.va = res.va.copy()
        q_bus_gen = res.q * base - case.q_fixed * base  # MVAr delivered by regulating devices
        if fictitious:
            # fictitious sources take whatever Q the bus needs; devices at that bus keep their share at zero
            res.fictitious_q = {bus: float(q_bus_gen[bus]) for bus in fictitious}
        on = s.committed & self.gen_reg
        weights = np.where(on, self.q_range, 0.0)
        wsum = np.bincount(lay.gen_bus, weights, lay.n_bus)
        share = np.divide(weights, wsum[lay.gen_bus], out=np.zeros_like(weights), where=wsum[lay.gen_bus] > 0)
        fict_mask = np.zeros(lay.n_bus, dtype=bool)
        if fictitious:
            fict_mask[list(fictitious)] = True
        qg = np.where(fict_mask[lay.gen_bus], 0.0, q_bus_gen[lay.gen_bus] * share)
        s.gen_q = np.where(on, qg, np.where(s.committed, s.gen_q, 0.0))
        if self.slack_gen is not None:
            others = self.bus_p_fixed(s)[self.slack_bus]
            s.gen_p[self.slack_gen] = res.p[self.slack_bus] * base - others
            s.swing_residual = float(s.gen_p[self.slack_gen] - self.slack_schedule)

    # -- losses -------------------------------------------------------------------------

    def injection_losses(self, s: SystemState) -> float:
        """Losses in MW as the balance of every specified injection."""
        return float(np.sum(self.bus_p_fixed(s, exclude_slack_gen=False)))

    def branch_losses(self, s: SystemState) -> float:
        return branch_losses(self.model, s.vm, s.va, s.branch_status, s.taps)


__all__ = ["SystemState", "GridSolver", "NonConvergence", "state_columns", "device_slot", "NEVER"]
