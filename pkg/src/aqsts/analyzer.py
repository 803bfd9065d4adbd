"""
Metrics over a merged result store.

Every function is a pure function of the store (plus the model it carries).
Windows select recorded rows by step range, calendar day/week, seasonal
period or the whole horizon.
"""

from __future__ import annotations

import dataclasses
import math
import time
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from aqsts.ess import Classification
from aqsts.network import IntertieDirection, NetworkModel
from aqsts.powerflow import branch_losses
from aqsts.scheduler import AnnualResultStore
from aqsts.state import GridSolver, SystemState

SWITCH_KINDS = {"line_disconnect": "disconnects", "line_reconnect": "reconnects",
                "tap_step": "tap_ops", "shunt_switch": "shunt_ops"}


@dataclasses.dataclass(frozen=True)
class MetricWindow:
    """Half-open step range ``[start, stop)`` or a calendar selector."""

    start: int | None = None
    stop: int | None = None
    period: int | None = None
    period_start_days: tuple[int, ...] = (0,)
    label: str = "year"

    @classmethod
    def year(cls) -> "MetricWindow":
        return cls()

    @classmethod
    def steps(cls, start: int, stop: int) -> "MetricWindow":
        return cls(start, stop, label=f"steps {start}-{stop}")

    @classmethod
    def day(cls, day: int, resolution: int) -> "MetricWindow":
        per = 1440 // resolution
        return cls(day * per, (day + 1) * per, label=f"day {day}")

    @classmethod
    def week(cls, week: int, resolution: int) -> "MetricWindow":
        per = 7 * 1440 // resolution
        return cls(week * per, (week + 1) * per, label=f"week {week}")

    @classmethod
    def seasonal(cls, period: int, start_days: Sequence[int]) -> "MetricWindow":
        return cls(period=period, period_start_days=tuple(start_days), label=f"period {period}")

    @classmethod
    def parse(cls, text: str, resolution: int, start_days: Sequence[int] = (0,)) -> "MetricWindow":
        """``year``, ``day:N``, ``week:N``, ``period:N`` or ``steps:A-B``."""
        if text in ("", "year", "all"):
            return cls.year()
        kind, _, arg = text.partition(":")
        try:
            if kind == "day":
                return cls.day(int(arg), resolution)
            if kind == "week":
                return cls.week(int(arg), resolution)
            if kind == "period":
                return cls.seasonal(int(arg), start_days)
            if kind == "steps":
                a, b = arg.split("-")
                return cls.steps(int(a), int(b))
        except ValueError:
            pass
        raise ValueError(f"unrecognised window '{text}'")

    def rows(self, store: AnnualResultStore) -> np.ndarray:
        steps = store.steps
        mask = np.ones(len(steps), dtype=bool)
        if self.start is not None:
            mask &= steps >= self.start
        if self.stop is not None:
            mask &= steps < self.stop
        if self.period is not None:
            day0 = 0 if store.start is None else int(store.start.dayofyear) - 1
            day = (steps * store.resolution // 1440 + day0) % 365
            mask &= np.searchsorted(np.asarray(self.period_start_days), day, side="right") == self.period
        return np.flatnonzero(mask)


def _contiguous(rows: np.ndarray, seeded: np.ndarray | None = None) -> list[np.ndarray]:
    """Split rows into runs of consecutive rows; ``seeded`` rows (re-initialized state) start a new run."""
    if not len(rows):
        return []
    breaks = np.diff(rows) != 1
    if seeded is not None:
        breaks |= seeded[rows[1:]]
    return np.split(rows, np.flatnonzero(breaks) + 1)


# -- losses -------------------------------------------------------------------------

@dataclasses.dataclass
class LossSummary:
    per_step: pd.DataFrame      # step, injection_MW, branch_MW
    max: float
    mean: float

    def as_dict(self) -> dict:
        return {"max_MW": self.max, "mean_MW": self.mean, "steps": int(len(self.per_step))}


def step_losses(model: NetworkModel, state: SystemState, solver: GridSolver | None = None) -> tuple[float, float]:
    """(injection-balance loss, branch I^2 R loss) in MW for one state."""
    solver = GridSolver(model) if solver is None else solver
    inj = solver.injection_losses(state)
    br = branch_losses(model, state.vm, state.va, state.branch_status, state.taps)
    return inj, br


def losses(store: AnnualResultStore, window: MetricWindow = MetricWindow()) -> LossSummary:
    rows = window.rows(store)
    solver = GridSolver(store.model)
    inj = np.empty(len(rows))
    br = np.empty(len(rows))
    for i, r in enumerate(rows):
        inj[i], br[i] = step_losses(store.model, store.state(int(r)), solver)
    frame = pd.DataFrame({"step": store.steps[rows], "injection_MW": inj, "branch_MW": br})
    if not len(rows):
        return LossSummary(frame, math.nan, math.nan)
    return LossSummary(frame, float(inj.max()), float(inj.mean()))


def peak_snapshot_loss(store: AnnualResultStore, summary: LossSummary | None = None) -> dict:
    """Loss at the single peak-load step, the traditional planning snapshot."""
    summary = losses(store) if summary is None else summary
    load = store.block("load", "p").sum(axis=1)
    row = int(np.argmax(load))
    step = int(store.steps[row])
    value = float(summary.per_step.loc[summary.per_step["step"] == step, "injection_MW"].iloc[0])
    return {"step": step, "load_MW": float(load[row]), "loss_MW": value}


# -- switching ---------------------------------------------------------------------

def switching_counts(store: AnnualResultStore, window: MetricWindow = MetricWindow()) -> pd.DataFrame:
    """Per-device switching counts over a window."""
    rows = window.rows(store)
    cols = ["device", "disconnects", "reconnects", "tap_ops", "shunt_ops"]
    if not len(rows) or not len(store.actions):
        return pd.DataFrame(columns=cols)
    steps = set(store.steps[rows].tolist())
    acts = store.actions[store.actions["kind"].isin(list(SWITCH_KINDS))]
    acts = acts[acts["time_index"].isin(steps)]
    if acts.empty:
        return pd.DataFrame(columns=cols)
    table = pd.crosstab(acts["device"], acts["kind"].map(SWITCH_KINDS))
    for c in cols[1:]:
        if c not in table:
            table[c] = 0
    return table[cols[1:]].reset_index().sort_values("device", ignore_index=True)


def telescoping_check(store: AnnualResultStore, window: MetricWindow = MetricWindow()) -> pd.DataFrame:
    """Net logged change vs. state difference per device and contiguous block of the window.

    For lines ``disconnects - reconnects`` must equal ``initial - final``
    in-service status; for taps and shunts the summed logged moves must
    equal the position change. Returns one row per device and block with
    the mismatch (zero when the identity holds). A block also ends where a
    segment was re-seeded, since that jump is not in the action log.
    """
    model = store.model
    seeded = np.isin(store.steps, np.fromiter(store.entries, dtype=np.int64, count=len(store.entries)))
    blocks = _contiguous(window.rows(store), seeded)
    groups = [("branch", "in_service", [b.id for b in model.branches]),
              ("transformer", "tap", [t.id for t in model.transformers]),
              ("shunt", "steps_on", [s.id for s in model.shunts])]
    out = []
    acts = store.actions
    for block in blocks:
        first, last = int(block[0]), int(block[-1])
        # entry states only exist at segment boundaries and after consecutive rows
        try:
            entry = store.entry_before(first)
        except KeyError:
            continue
        lo, hi = int(store.steps[first]), int(store.steps[last])
        win = acts[(acts["time_index"] >= lo) & (acts["time_index"] <= hi)] if len(acts) else acts
        for kind, quantity, ids in groups:
            idx = store.slot(kind, quantity)
            init = entry[idx]
            final = store.states[last, idx]
            for k, dev in enumerate(ids):
                mine = win[win["device"] == dev] if len(win) else win
                if kind == "branch":
                    logged = float((mine["kind"] == "line_disconnect").sum() - (mine["kind"] == "line_reconnect").sum())
                    expected = float(init[k] - final[k])
                else:
                    sel = mine[mine["kind"].isin(["tap_step", "shunt_switch"])]
                    logged = float((sel["after"] - sel["before"]).sum())
                    expected = float(final[k] - init[k])
                out.append({"block_start": lo, "block_end": hi, "device": dev, "kind": kind,
                            "logged": logged, "state_delta": expected, "mismatch": logged - expected})
    return pd.DataFrame(out, columns=["block_start", "block_end", "device", "kind", "logged", "state_delta",
                                      "mismatch"])


# -- voltage ---------------------------------------------------------------------

def series_stats(values: np.ndarray, v_min: float, v_max: float) -> dict:
    """Order statistics (linear-interpolation quantiles) and excursion counts of one series."""
    x = np.asarray(values, dtype=float)
    if x.size == 0:
        raise ValueError("voltage statistics need at least one sample")
    q1, med, q3 = np.percentile(x, [25, 50, 75])
    out = (x < v_min) | (x > v_max)
    longest = run = 0
    for flag in out:
        run = run + 1 if flag else 0
        longest = max(longest, run)
    events = int(np.count_nonzero(out[1:] & ~out[:-1]) + (1 if out.size and out[0] else 0))
    return {"median": float(med), "q1": float(q1), "q3": float(q3), "min": float(x.min()), "max": float(x.max()),
            "excursions": int(out.sum()), "excursion_events": events, "longest_excursion": int(longest)}


def voltage_statistics(store: AnnualResultStore, buses: Iterable[str] | None = None,
                       window: MetricWindow = MetricWindow()) -> pd.DataFrame:
    model = store.model
    rows = window.rows(store)
    vm = store.block("bus", "vm")[rows]
    wanted = [b.id for b in model.buses] if buses is None else list(buses)
    out = []
    for bid in wanted:
        i = model.bus_index[bid]
        b = model.buses[i]
        out.append({"bus": bid, **series_stats(vm[:, i], b.v_min, b.v_max)})
    return pd.DataFrame(out)


# -- flexibility and reactive availability -----------------------------------------

def flexibility(store: AnnualResultStore, window: MetricWindow = MetricWindow()) -> pd.DataFrame:
    """PII / PDE per step from intertie schedule headroom (artifact-defined)."""
    model = store.model
    rows = window.rows(store)
    sched = store.block("intertie", "schedule")[rows]
    pii = np.zeros(len(rows))
    pde = np.zeros(len(rows))
    for k, tie in enumerate(model.interties):
        if tie.direction is IntertieDirection.IMPORT:
            pii += np.maximum(tie.schedule_limit_max - sched[:, k], 0.0)
        else:
            pde += np.maximum(sched[:, k] - tie.schedule_limit_min, 0.0)
    return pd.DataFrame({"step": store.steps[rows], "pii_MW": pii, "pde_MW": pde})


def reactive_availability(store: AnnualResultStore, window: MetricWindow = MetricWindow()) -> pd.DataFrame:
    """Upward reactive headroom of committed voltage-regulating sources per step."""
    model = store.model
    rows = window.rows(store)
    q = store.block("generator", "q")[rows]
    on = store.block("generator", "committed")[rows] > 0
    qmax = np.array([g.q_max for g in model.generators])
    reg = np.array([g.regulates_voltage for g in model.generators])
    head = np.where(on & reg, np.maximum(qmax - q, 0.0), 0.0)
    return pd.DataFrame({"step": store.steps[rows], "q_headroom_MVAr": head.sum(axis=1)})


def agc_reserve_series(store: AnnualResultStore, window: MetricWindow = MetricWindow()) -> pd.DataFrame:
    model = store.model
    rows = window.rows(store)
    p = store.block("generator", "p")[rows]
    on = store.block("generator", "committed")[rows] > 0
    agc = np.array([g.agc_participant for g in model.generators])
    pmax = np.array([g.p_max for g in model.generators])
    res = np.where(on & agc, np.maximum(pmax - p, 0.0), 0.0).sum(axis=1)
    return pd.DataFrame({"step": store.steps[rows], "agc_reserve_MW": res})


# -- storage ------------------------------------------------------------------------

def ledger_frame(ledger) -> pd.DataFrame:
    rows = [{"unit": u, "day": d, "direction": dr, "classification": c, "MWh": v}
            for (u, d, dr, c), v in sorted(ledger.buckets.items())]
    return pd.DataFrame(rows, columns=["unit", "day", "direction", "classification", "MWh"])


def store_energy_frame(store: AnnualResultStore, window: MetricWindow = MetricWindow()) -> pd.DataFrame:
    """MWh buckets from the per-step storage trace of a run."""
    if store.ess is None or store.ess.empty:
        return pd.DataFrame(columns=["unit", "day", "direction", "classification", "MWh"])
    steps = set(store.steps[window.rows(store)].tolist())
    e = store.ess[store.ess["step"].isin(steps)]
    e = e[(e["power_MW"] != 0.0) & (e["classification"] != Classification.NONE.value)]
    per_day = 1440 // store.resolution
    frame = pd.DataFrame({"unit": e["unit"], "day": e["step"] // per_day,
                          "direction": np.where(e["power_MW"] < 0, "charge", "discharge"),
                          "classification": e["classification"],
                          "MWh": e["power_MW"].abs() * store.resolution / 60.0})
    return frame.groupby(["unit", "day", "direction", "classification"], as_index=False)["MWh"].sum()


def ess_utilization(energy: pd.DataFrame, grouping: str = "year") -> pd.DataFrame:
    """Charged / discharged MWh per classification and the marketable ratio.

    ``grouping`` is ``year``, ``week`` or ``day``. The ratio is absent
    (NaN) when no classified energy moved in a group.
    """
    e = energy.copy()
    if grouping == "day":
        e["group"] = e["day"]
    elif grouping == "week":
        e["group"] = e["day"] // 7
    elif grouping == "year":
        e["group"] = 0
    else:
        raise ValueError(f"unknown grouping {grouping!r}")
    cols = [f"{d}_{c}_MWh" for d in ("charge", "discharge")
            for c in (Classification.MITIGATION.value, Classification.BALANCING.value)]
    if e.empty:
        return pd.DataFrame(columns=["unit", "group", *cols, "marketable_ratio"])
    e["col"] = e["direction"] + "_" + e["classification"] + "_MWh"
    table = e.pivot_table(index=["unit", "group"], columns="col", values="MWh", aggfunc="sum", fill_value=0.0)
    for c in cols:
        if c not in table:
            table[c] = 0.0
    table = table[cols].reset_index()
    mit = table[cols[0]] + table[cols[2]]
    bal = table[cols[1]] + table[cols[3]]
    total = mit + bal
    table["marketable_ratio"] = np.where(total > 0, mit / total.where(total > 0, 1.0), np.nan)
    table.columns.name = None
    return table


# -- generation distribution -------------------------------------------------------

def distribution_summary(values: np.ndarray, bins: np.ndarray) -> dict:
    x = np.asarray(values, dtype=float)
    counts, _ = np.histogram(x, bins=bins)
    q = np.percentile(x, [5, 25, 50, 75, 95]) if x.size else [math.nan] * 5
    return {"n": int(x.size), "q05": float(q[0]), "q25": float(q[1]), "median": float(q[2]),
            "q75": float(q[3]), "q95": float(q[4]), "counts": counts.tolist(), "edges": bins.tolist()}


def generation_distribution(base: np.ndarray, net: np.ndarray, limits, bins: int = 20) -> dict:
    """Base vs. net (wind plus storage) generation for one zone and period."""
    lo = float(min(np.min(base), np.min(net)))
    hi = float(max(np.max(base), np.max(net)))
    edges = np.linspace(lo, hi if hi > lo else lo + 1.0, bins + 1)
    mass_base = float(np.clip(np.asarray(base) - limits.gen_max_lim, 0.0, None).sum())
    mass_net = float(np.clip(np.asarray(net) - limits.gen_max_lim, 0.0, None).sum())
    return {"zone": limits.zone, "period": limits.period, "gen_max_lim": limits.gen_max_lim,
            "gen_min_lim": limits.gen_min_lim, "base": distribution_summary(base, edges),
            "net": distribution_summary(net, edges), "mass_above_max_base": mass_base,
            "mass_above_max_net": mass_net}


def store_generation_distribution(store: AnnualResultStore, zone: str, period: int, limits: Mapping,
                                  start_days: Sequence[int]) -> dict:
    model = store.model
    rows = MetricWindow.seasonal(period, start_days).rows(store)
    gp = store.block("generator", "p")[rows]
    wind = [k for k, g in enumerate(model.generators) if g.kind.value == "wind" and g.zone == zone]
    base = gp[:, wind].sum(axis=1)
    units = [k for k, e in enumerate(model.ess) if e.zone == zone]
    net = base + store.block("ess", "p")[rows][:, units].sum(axis=1) if units else base
    return generation_distribution(base, net, limits[(zone, period)])


# -- load heatmap ----------------------------------------------------------------------

def load_heatmap(store: AnnualResultStore, aggregate: str = "peak") -> pd.DataFrame:
    """Day-of-week x relative week matrix of daily total demand (MW).

    Weeks count from the first recorded day; a trailing partial week forms
    its own column.
    """
    total = store.block("load", "p").sum(axis=1)
    per_day = 1440 // store.resolution
    day = store.steps // per_day
    frame = pd.DataFrame({"day": day, "load": total})
    agg = frame.groupby("day")["load"].agg("max" if aggregate == "peak" else "mean")
    d0 = int(agg.index.min())
    rel = agg.index - d0
    matrix = pd.DataFrame({"dow": rel % 7, "week": rel // 7, "value": agg.values}) \
        .pivot(index="dow", columns="week", values="value")
    return matrix


# -- resolution study -----------------------------------------------------------

def resolution_study(run: Callable[[int], AnnualResultStore], resolutions: Sequence[int]) -> pd.DataFrame:
    """Run the same horizon at each resolution and tabulate runtime and losses."""
    out = []
    for res in resolutions:
        if 60 % res:
            raise ValueError(f"resolution {res} does not divide 60")
        t0 = time.perf_counter()
        store = run(res)
        wall = time.perf_counter() - t0
        summ = losses(store)
        pps = peak_snapshot_loss(store, summ)
        out.append({"resolution_min": res, "runtime_s": wall, "steps": store.n_steps,
                    "loss_mean_MW": summ.mean, "loss_max_MW": summ.max, "pps_loss_MW": pps["loss_MW"],
                    "failures": len(store.failures)})
    return pd.DataFrame(out)


# -- long format export ----------------------------------------------------------

def long_format(metric: str, frame: pd.DataFrame, key: str, step_col: str | None, value_cols: Sequence[str]) -> pd.DataFrame:
    rows = []
    for col in value_cols:
        rows.append(pd.DataFrame({"metric": f"{metric}.{col}",
                                  "key": frame[key] if key in frame else key,
                                  "window": frame[step_col] if step_col else "all",
                                  "value": frame[col]}))
    return pd.concat(rows, ignore_index=True) if rows else pd.DataFrame(columns=["metric", "key", "window", "value"])
