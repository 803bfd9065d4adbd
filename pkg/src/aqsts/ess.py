"""
Threshold-based storage dispatch for wind smoothing.

The controller is causal: every decision uses the zone's wind output at the
current step, the unit's state of charge and the statistical generation
limits of the active seasonal period. Power follows the injection sign
convention used across the package (discharge > 0, charge < 0).
"""

from __future__ import annotations

import bisect
import dataclasses
import enum
import logging
import math
from collections import defaultdict
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

LIMIT_SPREAD = 1.5


class InsufficientSamples(ValueError):
    pass


class Mode(str, enum.Enum):
    CHARGING = "charging"
    DISCHARGING = "discharging"
    STANDBY = "standby"


class Classification(str, enum.Enum):
    MITIGATION = "variability_mitigation"
    BALANCING = "soc_balancing"
    NONE = "none"


@dataclasses.dataclass(frozen=True)
class EssUnit:
    id: str
    bus: str
    power_capacity: float
    energy_capacity: float
    soc: float = 50.0
    soc_balance: float = 50.0
    charge_efficiency: float = 1.0
    discharge_efficiency: float = 1.0
    zone: str | None = None

    def check(self) -> None:
        if not 0.0 <= self.soc <= 100.0:
            raise ValueError(f"soc {self.soc} outside [0, 100]")
        if not 0.0 < self.soc_balance < 100.0:
            raise ValueError(f"soc_balance {self.soc_balance} outside (0, 100)")
        for eff in (self.charge_efficiency, self.discharge_efficiency):
            if not 0.0 < eff <= 1.0:
                raise ValueError(f"efficiency {eff} outside (0, 1]")
        if self.power_capacity <= 0 or self.energy_capacity <= 0:
            raise ValueError("capacities must be positive")


@dataclasses.dataclass(frozen=True)
class GenerationLimits:
    zone: str
    period: int
    gen_max_lim: float
    gen_min_lim: float
    mu: float
    sigma: float


@dataclasses.dataclass(frozen=True)
class PeakCalendar:
    """Peak-load windows as half-open ``[start, end)`` step intervals."""

    intervals: tuple[tuple[int, int], ...] = ()
    resolution: int = 5

    def __post_init__(self):
        ivs = tuple(sorted((int(a), int(b)) for a, b in self.intervals))
        for (a0, b0), (a1, _) in zip(ivs, ivs[1:]):
            if a1 < b0:
                raise ValueError(f"peak windows overlap: [{a0}, {b0}) and [{a1}, ...)")
        if any(b <= a for a, b in ivs):
            raise ValueError("empty peak window")
        object.__setattr__(self, "intervals", ivs)
        object.__setattr__(self, "_starts", [a for a, _ in ivs])

    def in_peak(self, t: int) -> bool:
        k = bisect.bisect_right(self._starts, t) - 1
        return k >= 0 and t < self.intervals[k][1]

    def mask(self, n_steps: int, offset: int = 0) -> np.ndarray:
        out = np.zeros(n_steps, dtype=bool)
        for a, b in self.intervals:
            lo, hi = max(a - offset, 0), min(b - offset, n_steps)
            if hi > lo:
                out[lo:hi] = True
        return out

    def at_resolution(self, resolution: int) -> "PeakCalendar":
        """Same windows on a coarser or finer step grid (minute-exact)."""
        if resolution == self.resolution:
            return self
        ivs = [(a * self.resolution // resolution, -(-b * self.resolution // resolution)) for a, b in self.intervals]
        merged: list[list[int]] = []
        for a, b in ivs:
            if merged and a <= merged[-1][1]:
                merged[-1][1] = max(merged[-1][1], b)
            else:
                merged.append([a, b])
        return PeakCalendar(tuple((a, b) for a, b in merged), resolution)

    @classmethod
    def daily(cls, windows_minutes: Sequence[tuple[int, int]], n_days: int, resolution: int,
              days: Iterable[int] | None = None) -> "PeakCalendar":
        per_day = 1440 // resolution
        chosen = range(n_days) if days is None else days
        ivs = []
        for d in chosen:
            for a, b in windows_minutes:
                ivs.append((d * per_day + a // resolution, d * per_day + b // resolution))
        return cls(tuple(ivs), resolution)


@dataclasses.dataclass(frozen=True)
class EssDecision:
    mode: Mode
    power: float = 0.0
    classification: Classification = Classification.NONE
    branch: str = ""
    capped: bool = False


# -- generation limits ----------------------------------------------------------

def limits_from_samples(samples: Sequence[float], zone: str = "", period: int = 1, ddof: int = 1) -> GenerationLimits:
    x = np.asarray(samples, dtype=float)
    if x.size < 2:
        raise InsufficientSamples(f"zone {zone!r} period {period}: {x.size} sample(s), need at least 2")
    mu = float(np.mean(x))
    sigma = float(np.std(x, ddof=ddof))
    return GenerationLimits(zone, period, mu + LIMIT_SPREAD * sigma, mu - LIMIT_SPREAD * sigma, mu, sigma)


def compute_limits(zone_generation: Mapping[str, np.ndarray], period_map: np.ndarray,
                   ddof: int = 1) -> dict[tuple[str, int], GenerationLimits]:
    """Limits mu +/- 1.5 sigma for every (zone, period) pair."""
    periods = np.asarray(period_map)
    out = {}
    for zone, series in zone_generation.items():
        series = np.asarray(series, dtype=float)
        if series.shape != periods.shape:
            raise ValueError(f"zone {zone!r}: series length {series.size} != period map length {periods.size}")
        for p in np.unique(periods):
            out[(zone, int(p))] = limits_from_samples(series[periods == p], zone, int(p), ddof)
    return out


# -- mode selection -----------------------------------------------------------

def select_mode(gen_t: float, limits: GenerationLimits, soc: float, soc_balance: float, t: int,
                peak: PeakCalendar, block_all_peak_charging: bool = False) -> EssDecision:
    """Operating mode for one step.

    ``block_all_peak_charging`` extends the peak-window charging ban to SOC
    balancing; by default only surplus charging is blocked.
    """
    hi, lo = limits.gen_max_lim, limits.gen_min_lim
    if not (math.isfinite(gen_t) and math.isfinite(hi) and math.isfinite(lo)):
        return EssDecision(Mode.STANDBY, branch="else")
    if gen_t >= hi:
        if peak.in_peak(t):
            return EssDecision(Mode.STANDBY, branch="surplus/peak")
        return EssDecision(Mode.CHARGING, classification=Classification.MITIGATION, branch="surplus")
    if gen_t <= lo:
        return EssDecision(Mode.DISCHARGING, classification=Classification.MITIGATION, branch="shortage")
    if lo < gen_t < hi:
        if soc < soc_balance:
            if block_all_peak_charging and peak.in_peak(t):
                return EssDecision(Mode.STANDBY, branch="within/peak")
            return EssDecision(Mode.CHARGING, classification=Classification.BALANCING, branch="within/below")
        if soc > soc_balance:
            return EssDecision(Mode.DISCHARGING, classification=Classification.BALANCING, branch="within/above")
        return EssDecision(Mode.STANDBY, branch="within/balanced")
    return EssDecision(Mode.STANDBY, branch="else")


def _dispatch(decision: EssDecision, gen_t: float, limits: GenerationLimits, unit: EssUnit,
              resolution: int, soc: float, soc_balance: float) -> tuple[float, bool]:
    hours = resolution / 60.0
    e = unit.energy_capacity
    if decision.mode is Mode.CHARGING:
        room = max(100.0 - soc, 0.0) / 100.0 * e / (hours * unit.charge_efficiency)
        if decision.classification is Classification.MITIGATION:
            target = gen_t - limits.gen_max_lim
        else:
            # balancing must not push the zone below the band
            target = min((soc_balance - soc) / 100.0 * e / (hours * unit.charge_efficiency), gen_t - limits.gen_min_lim)
        p = min(target, unit.power_capacity, room)
        capped = p < target and decision.classification is Classification.MITIGATION
        return -max(p, 0.0), capped
    if decision.mode is Mode.DISCHARGING:
        avail = max(soc, 0.0) / 100.0 * e * unit.discharge_efficiency / hours
        if decision.classification is Classification.MITIGATION:
            target = limits.gen_min_lim - gen_t
        else:
            target = min((soc - soc_balance) / 100.0 * e * unit.discharge_efficiency / hours, limits.gen_max_lim - gen_t)
        p = min(target, unit.power_capacity, avail)
        capped = p < target and decision.classification is Classification.MITIGATION
        return max(p, 0.0), capped
    return 0.0, decision.branch == "surplus/peak"


def dispatch_power(decision: EssDecision, gen_t: float, limits: GenerationLimits, unit: EssUnit,
                   resolution: int, soc: float | None = None, soc_balance: float | None = None) -> float:
    """Signed injection in MW (negative while charging)."""
    soc = unit.soc if soc is None else soc
    bal = unit.soc_balance if soc_balance is None else soc_balance
    return _dispatch(decision, gen_t, limits, unit, resolution, soc, bal)[0]


class SocUpdate(NamedTuple):
    soc: float
    clipped: bool


def update_soc(unit: EssUnit, applied_power: float, resolution: int, soc: float | None = None) -> SocUpdate:
    soc = unit.soc if soc is None else soc
    hours = resolution / 60.0
    if applied_power < 0:
        new = soc + (-applied_power) * hours * unit.charge_efficiency / unit.energy_capacity * 100.0
    elif applied_power > 0:
        new = soc - applied_power * hours / (unit.discharge_efficiency * unit.energy_capacity) * 100.0
    else:
        return SocUpdate(soc, False)
    if new < 0.0 or new > 100.0:
        log.info("SOC of %s clipped from %.6f%%", unit.id, new)
        return SocUpdate(min(max(new, 0.0), 100.0), True)
    return SocUpdate(new, False)


def step_unit(unit: EssUnit, gen_t: float, limits: GenerationLimits, soc: float, t: int,
              peak: PeakCalendar, resolution: int, soc_balance: float | None = None,
              block_all_peak_charging: bool = False) -> EssDecision:
    """select_mode + dispatch_power for one unit and one step."""
    bal = unit.soc_balance if soc_balance is None else soc_balance
    decision = select_mode(gen_t, limits, soc, bal, t, peak, block_all_peak_charging)
    power, capped = _dispatch(decision, gen_t, limits, unit, resolution, soc, bal)
    if power == 0.0 and decision.mode is not Mode.STANDBY:
        decision = dataclasses.replace(decision, classification=Classification.NONE)
    return dataclasses.replace(decision, power=power, capped=capped)


# -- energy accounting -----------------------------------------------------------

class EnergyLedger:
    """MWh buckets keyed by (unit, day, direction, classification)."""

    def __init__(self):
        self.buckets: dict[tuple[str, int, str, str], float] = defaultdict(float)

    def add(self, unit_id: str, day: int, decision: EssDecision, applied_power: float, resolution: int) -> None:
        if applied_power == 0.0 or decision.classification is Classification.NONE:
            return
        direction = "charge" if applied_power < 0 else "discharge"
        self.buckets[(unit_id, day, direction, decision.classification.value)] += abs(applied_power) * resolution / 60.0

    def merge(self, other: "EnergyLedger") -> "EnergyLedger":
        out = EnergyLedger()
        for src in (self, other):
            for k, v in src.buckets.items():
                out.buckets[k] += v
        return out

    def total(self, unit: str | None = None, days: range | None = None, direction: str | None = None,
              classification: str | None = None) -> float:
        vals = [v for (u, d, dr, c), v in self.buckets.items()
                if (unit is None or u == unit) and (days is None or d in days)
                and (direction is None or dr == direction) and (classification is None or c == classification)]
        return math.fsum(vals)

    def marketable_ratio(self, unit: str | None = None, days: range | None = None) -> float | None:
        mit = self.total(unit, days, classification=Classification.MITIGATION.value)
        bal = self.total(unit, days, classification=Classification.BALANCING.value)
        if mit + bal == 0.0:
            return None
        return mit / (mit + bal)


def accumulate_energy(ledger: EnergyLedger, decision: EssDecision, applied_power: float, resolution: int,
                      unit_id: str = "ess", day: int = 0) -> EnergyLedger:
    ledger.add(unit_id, day, decision, applied_power, resolution)
    return ledger


# -- year-long standalone run --------------------------------------------------------

@dataclasses.dataclass
class EssTrace:
    unit_id: str
    mode: np.ndarray
    power: np.ndarray
    soc: np.ndarray
    classification: np.ndarray
    capped: np.ndarray
    clipped: np.ndarray


def simulate(units: Sequence[EssUnit], zone_generation: Mapping[str, np.ndarray],
             limits: Mapping[tuple[str, int], GenerationLimits], period_map: np.ndarray,
             peak: PeakCalendar, resolution: int, soc_balance: float | None = None,
             block_all_peak_charging: bool = False) -> tuple[dict[str, EssTrace], EnergyLedger]:
    """Drive every unit through the whole profile without a network solve.

    ``soc`` in each trace is the state of charge *after* the step.
    """
    ledger = EnergyLedger()
    traces = {}
    steps_per_day = 1440 // resolution
    for unit in units:
        gen = np.asarray(zone_generation[unit.zone], dtype=float)
        n = gen.size
        mode = np.empty(n, dtype=object)
        cls = np.empty(n, dtype=object)
        power = np.zeros(n)
        socs = np.zeros(n)
        capped = np.zeros(n, dtype=bool)
        clipped = np.zeros(n, dtype=bool)
        soc = unit.soc
        for t in range(n):
            lim = limits[(unit.zone, int(period_map[t]))]
            d = step_unit(unit, float(gen[t]), lim, soc, t, peak, resolution, soc_balance, block_all_peak_charging)
            upd = update_soc(unit, d.power, resolution, soc)
            soc = upd.soc
            ledger.add(unit.id, t // steps_per_day, d, d.power, resolution)
            mode[t], cls[t], power[t], socs[t] = d.mode.value, d.classification.value, d.power, soc
            capped[t], clipped[t] = d.capped, upd.clipped
        traces[unit.id] = EssTrace(unit.id, mode, power, socs, cls, capped, clipped)
    return traces, ledger
