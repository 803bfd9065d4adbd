"""
Bundled synthetic two-zone system.

A 30-bus network with a 735 kV backbone, 315 kV sub-transmission, 25 kV
load substations, an East hydro plant providing AGC, a West slack, wind in
both zones, two storage aggregations and two interties. Annual profiles are
generated deterministically from a seed because a year of 5-minute data is
too large to ship.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from scipy.ndimage import gaussian_filter1d
from scipy.special import expit

from aqsts.ess import EssUnit
from aqsts.network import (Branch, Bus, DemandResource, Generator, Intertie, Load, NetworkModel, ShuntBank,
                           Transformer, save_network)
from aqsts.profiles import TimeSeriesDataset, write_profiles

YEAR_START = "2035-01-01"
PERIOD_START_DAYS = (0, 59, 120, 243, 304)
PEAK_WINDOWS_MIN = ((360, 540), (960, 1200))
PEAK_PERIODS = (1, 5)

# storage sized from the reference 860 MW / 3440 MWh (East) and 640 MW / 2560 MWh ratios
ESS_SCALE = 0.25
_LOADS = {  # bus: share of system peak
    "E_L1": 0.085, "E_L2": 0.075, "E_L3": 0.070, "E_L4": 0.080, "E_L5": 0.065, "E_L6": 0.070, "E_L7": 0.060,
    "W_L1": 0.080, "W_L2": 0.070, "W_L3": 0.065, "W_L4": 0.075, "W_L5": 0.065, "W_L6": 0.070, "W_L7": 0.070,
}
PEAK_LOAD_MW = 5000.0
WIND_CAPACITY = {"East": 900.0, "West": 600.0}


def build_network() -> NetworkModel:
    ehv = dict(base_kv=735.0, v_min=0.95, v_max=1.05)
    hv = dict(base_kv=315.0, v_min=0.94, v_max=1.06)
    lv = dict(base_kv=25.0, v_min=0.95, v_max=1.05, voltage_target=1.0)
    buses = [
        Bus("E_HYD", kind="pv", voltage_target=1.03, zone="East", **ehv),
        Bus("E_735A", zone="East", **ehv),
        Bus("E_735B", kind="pv", voltage_target=1.02, zone="East", **ehv),
        Bus("E_735C", zone="East", **ehv),
        Bus("E_IMP", zone="East", **ehv),
        Bus("W_735A", kind="slack", voltage_target=1.03, zone="West", **ehv),
        Bus("W_735B", zone="West", **ehv),
        Bus("W_735C", kind="pv", voltage_target=1.02, zone="West", **ehv),
        Bus("W_735D", zone="West", **ehv),
        Bus("W_EXP", zone="West", **ehv),
        Bus("E_315A", zone="East", **hv),
        Bus("E_315B", zone="East", **hv),
        Bus("E_WIND", zone="East", **hv),
        Bus("W_315A", zone="West", **hv),
        Bus("W_315B", zone="West", **hv),
        Bus("W_WIND", zone="West", **hv),
    ]
    buses += [Bus(b, zone="East" if b.startswith("E") else "West", **lv) for b in _LOADS]

    def line(i, f, t, x, b, limit=3000.0, switchable=False):
        return Branch(i, f, t, resistance=x / 15.0, reactance=x, charging_susceptance=b,
                      thermal_limit=limit, switchable=switchable)

    branches = [
        line("L_HYD_A1", "E_HYD", "E_735A", 0.004, 0.4),
        line("L_HYD_A2", "E_HYD", "E_735A", 0.004, 0.4),
        line("L_EA_EB", "E_735A", "E_735B", 0.005, 0.5),
        line("L_EB_EC", "E_735B", "E_735C", 0.005, 0.5),
        line("L_EA_EC", "E_735A", "E_735C", 0.008, 0.8, switchable=True),
        line("L_EB_IMP", "E_735B", "E_IMP", 0.003, 0.3),
        line("L_EB_WB", "E_735B", "W_735B", 0.006, 0.6),
        line("L_EC_WC", "E_735C", "W_735C", 0.008, 0.8, switchable=True),
        line("L_WA_WB", "W_735A", "W_735B", 0.004, 0.4),
        line("L_WB_WC", "W_735B", "W_735C", 0.005, 0.5),
        line("L_WC_WD", "W_735C", "W_735D", 0.005, 0.5),
        line("L_WA_WD", "W_735A", "W_735D", 0.009, 0.9, switchable=True),
        line("L_WD_EXP", "W_735D", "W_EXP", 0.003, 0.3),
        line("L_E315_AB", "E_315A", "E_315B", 0.02, 0.1, limit=1500.0),
        line("L_E_WIND", "E_315B", "E_WIND", 0.01, 0.05, limit=1500.0),
        line("L_W315_AB", "W_315A", "W_315B", 0.02, 0.1, limit=1500.0),
        line("L_W_WIND", "W_315B", "W_WIND", 0.01, 0.05, limit=1500.0),
    ]

    def xfmr(i, f, t, x, regulated=None, limit=2500.0):
        return Transformer(i, f, t, resistance=x / 40.0, reactance=x, regulated_bus=regulated,
                           thermal_limit=limit, deadband=0.02)

    transformers = [
        xfmr("T_EA", "E_735A", "E_315A", 0.004),
        xfmr("T_EC", "E_735C", "E_315B", 0.004),
        xfmr("T_WB", "W_735B", "W_315A", 0.004),
        xfmr("T_WD", "W_735D", "W_315B", 0.004),
    ]
    feeders = {"E_L1": "E_315A", "E_L2": "E_315A", "E_L3": "E_315B", "E_L4": "E_735B", "E_L5": "E_315B",
               "E_L6": "E_735C", "E_L7": "E_315A", "W_L1": "W_315A", "W_L2": "W_315A", "W_L3": "W_315B",
               "W_L4": "W_735B", "W_L5": "W_315B", "W_L6": "W_735D", "W_L7": "W_315A"}
    for b, up in feeders.items():
        transformers.append(xfmr(f"T_{b}", up, b, 0.008, regulated=b, limit=1200.0))

    shunts = [ShuntBank(f"C_{b}", b, "capacitor", 20.0, 4) for b in _LOADS]
    shunts += [
        ShuntBank("R_E_735C", "E_735C", "reactor", 50.0, 4),
        ShuntBank("R_W_735D", "W_735D", "reactor", 50.0, 4),
        ShuntBank("C_E_315B", "E_315B", "capacitor", 50.0, 4),
        ShuntBank("C_W_315B", "W_315B", "capacitor", 50.0, 4),
    ]

    generators = [
        Generator(f"E_HYD_U{k:02d}", "E_HYD", p_min=40.0, p_max=450.0, q_min=-150.0, q_max=250.0,
                  ramp_up=20.0, ramp_down=20.0, agc_participant=True, optimal_dispatch=320.0,
                  committed=k <= 8, startup_priority=k, zone="East")
        for k in range(1, 13)
    ]
    generators += [
        Generator("W_SLACK", "W_735A", p_min=0.0, p_max=4000.0, q_min=-2000.0, q_max=2000.0,
                  optimal_dispatch=600.0, zone="West"),
        Generator("E_SC", "E_735B", q_min=-400.0, q_max=600.0, kind="compensator", zone="East"),
        Generator("W_SC", "W_735C", q_min=-400.0, q_max=600.0, kind="compensator", zone="West"),
        Generator("E_WIND_G", "E_WIND", p_max=WIND_CAPACITY["East"], kind="wind", zone="East"),
        Generator("W_WIND_G", "W_WIND", p_max=WIND_CAPACITY["West"], kind="wind", zone="West"),
    ]
    loads = [Load(f"LD_{b}", b, p_mw=round(PEAK_LOAD_MW * s * 0.8, 3), q_mvar=round(PEAK_LOAD_MW * s * 0.8 * 0.1, 3),
                  zone="East" if b.startswith("E") else "West") for b, s in _LOADS.items()]
    ess = [
        EssUnit("BESS1", "E_WIND", power_capacity=860.0 * ESS_SCALE, energy_capacity=3440.0 * ESS_SCALE,
                soc=50.0, soc_balance=50.0, zone="East"),
        EssUnit("BESS2", "W_WIND", power_capacity=640.0 * ESS_SCALE, energy_capacity=2560.0 * ESS_SCALE,
                soc=50.0, soc_balance=50.0, zone="West"),
    ]
    interties = [
        Intertie("TIE_IMPORT", "E_IMP", "import", 0.0, 1500.0, 600.0),
        Intertie("TIE_EXPORT", "W_EXP", "export", 0.0, 1000.0, 400.0),
    ]
    demand = [
        DemandResource("DR_E_L1", "E_L1", "interruptible_demand", 100.0, activation_delay=0, max_duration=12),
        DemandResource("DR_W_L1", "W_L1", "interruptible_demand", 80.0, activation_delay=2, max_duration=12),
        DemandResource("VR_E_L2", "E_L2", "voltage_reduction_block", 40.0, max_duration=12),
    ]
    return NetworkModel("two-zone-30", 100.0, tuple(buses), tuple(branches), tuple(transformers), tuple(shunts),
                        tuple(generators), tuple(loads), tuple(ess), tuple(interties), tuple(demand),
                        zones=("East", "West"))


def without_storage(model: NetworkModel) -> NetworkModel:
    return model.replace(ess=())


# -- calendar ----------------------------------------------------------------------

def period_of_day(day: np.ndarray) -> np.ndarray:
    """Seasonal period (1..5) for each day of year."""
    return np.searchsorted(np.array(PERIOD_START_DAYS), np.asarray(day), side="right")


def period_map(n_steps: int, resolution: int, day_offset: int = 0) -> np.ndarray:
    day = np.arange(n_steps) * resolution // 1440 + day_offset
    return period_of_day(day % 365)


def peak_windows(days: int, start: str = YEAR_START) -> pd.DataFrame:
    """Peak-load windows on weekdays of the winter periods."""
    rows = []
    t0 = pd.Timestamp(start)
    for d in range(days):
        date = t0 + pd.Timedelta(days=d)
        if date.weekday() >= 5 or period_of_day(d % 365) not in PEAK_PERIODS:
            continue
        for a, b in PEAK_WINDOWS_MIN:
            rows.append((date + pd.Timedelta(minutes=a), date + pd.Timedelta(minutes=b)))
    return pd.DataFrame(rows, columns=["start", "end"])


# -- profiles ---------------------------------------------------------------------

def _smooth_noise(rng: np.random.Generator, n: int, sigma_steps: float) -> np.ndarray:
    x = gaussian_filter1d(rng.standard_normal(n), sigma_steps, mode="wrap")
    return x / (x.std() or 1.0)


def build_profiles(days: int = 365, resolution: int = 5, seed: int = 2035, start: str = YEAR_START,
                   model: NetworkModel | None = None) -> TimeSeriesDataset:
    """Smooth synthetic profiles for the bundled network.

    Loads combine a winter-peaking seasonal factor, a two-hump daily shape
    and a weekend dip; wind is filtered noise mapped through a logistic
    curve; intertie schedules follow a daily cycle.
    """
    model = build_network() if model is None else model
    rng = np.random.default_rng(seed)
    per_day = 1440 // resolution
    n = days * per_day
    minutes = np.arange(n) * resolution
    day = minutes / 1440.0
    hour = (minutes % 1440) / 60.0
    weekday = (pd.Timestamp(start).weekday() + (minutes // 1440)) % 7
    seasonal = 0.80 + 0.20 * np.cos(2 * np.pi * (day - 20.0) / 365.0)
    daily = (0.86 + 0.08 * np.exp(-((hour - 8.0) / 2.5) ** 2) + 0.12 * np.exp(-((hour - 18.5) / 3.0) ** 2)
             - 0.06 * np.exp(-((hour - 3.5) / 3.0) ** 2))
    weekly = np.where(weekday >= 5, 0.94, 1.0)
    shape = seasonal * daily * weekly
    shape = shape / shape.max()

    series: dict[str, np.ndarray] = {}
    for ld in model.loads:
        share = _LOADS.get(ld.bus, ld.p_mw / PEAK_LOAD_MW / 0.8)
        wobble = 1.0 + 0.01 * _smooth_noise(rng, n, 6 * 60 / resolution)
        series[ld.id] = PEAK_LOAD_MW * share * shape * wobble

    for zone, cap in WIND_CAPACITY.items():
        slow = _smooth_noise(rng, n, 36 * 60 / resolution)
        fast = _smooth_noise(rng, n, 4 * 60 / resolution)
        season = 0.35 * np.cos(2 * np.pi * (day - 15.0) / 365.0)
        cf = 0.92 * expit(1.1 * slow + 0.35 * fast + season - 0.55)
        gen = next(g for g in model.generators if g.kind.value == "wind" and g.zone == zone)
        series[gen.id] = cap * cf

    tie_shape = np.sin(2 * np.pi * (hour - 9.0) / 24.0)
    for tie in model.interties:
        mid = tie.current_schedule
        series[tie.id] = mid + 0.25 * mid * tie_shape
    return TimeSeriesDataset(resolution, pd.Timestamp(start), series, {k: f"synthetic seed={seed}" for k in series})


def constant_profiles(model: NetworkModel, steps: int, resolution: int, start: str = YEAR_START,
                      level: float = 0.8) -> TimeSeriesDataset:
    series = {ld.id: np.full(steps, PEAK_LOAD_MW * _LOADS[ld.bus] * level) for ld in model.loads}
    for zone, cap in WIND_CAPACITY.items():
        gen = next(g for g in model.generators if g.kind.value == "wind" and g.zone == zone)
        series[gen.id] = np.full(steps, 0.4 * cap)
    for tie in model.interties:
        series[tie.id] = np.full(steps, tie.current_schedule)
    return TimeSeriesDataset(resolution, pd.Timestamp(start), series)


def stress_profiles(model: NetworkModel, resolution: int = 5, start: str = YEAR_START) -> TimeSeriesDataset:
    """Two steps: steady moderate load, then full wind loss in both zones and a 10 % load rise."""
    base = constant_profiles(model, 2, resolution, start, level=0.75)
    for ld in model.loads:
        base.series[ld.id][1] *= 1.10
    for g in model.generators:
        if g.kind.value == "wind":
            base.series[g.id][0] = 0.9 * g.p_max
            base.series[g.id][1] = 0.0
    return base


# -- writing the example directory -------------------------------------------------

def scenario_config(name: str, with_storage: bool, resolution: int = 15, workers: int = 4,
                    mode: str = "parallel") -> dict:
    return {
        "name": name,
        "network": "network.yaml" if with_storage else "network_no_ess.yaml",
        "profiles": ["profiles.csv"],
        "peak_calendar": "peak_calendar.csv",
        "periods": {"start_days": list(PERIOD_START_DAYS)},
        "engine": {"resolution": resolution, "max_injection_per_substep": 100.0, "record_every": 1},
        "powerflow": {"tolerance": 1e-8, "max_iterations": 30, "mode": "newton_raphson"},
        "operator": {"balance_threshold": 20.0, "agc_reserve_min": 300.0, "dguoo_band": 100.0},
        "ess": {"enabled": with_storage, "limits": "computed", "soc_balance": 50.0},
        "scheduler": {"mode": mode, "workers": workers, "warm_in_steps": 12},
        "horizon": {"start": 0, "steps": None},
        "output_dir": f"runs/{name}",
        "seed": 0,
    }


def write_example(directory: str | Path, days: int = 365, resolution: int = 5, seed: int = 2035) -> dict[str, Path]:
    """Write network, profiles, peak calendar and the S1/S2 configs."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    model = build_network()
    paths = {"network": out / "network.yaml", "network_no_ess": out / "network_no_ess.yaml",
             "profiles": out / "profiles.csv", "peak_calendar": out / "peak_calendar.csv"}
    save_network(model, paths["network"])
    save_network(without_storage(model), paths["network_no_ess"])
    write_profiles(build_profiles(days, resolution, seed, model=model), paths["profiles"])
    cal = peak_windows(days)
    cal.assign(start=cal.start.dt.strftime("%Y-%m-%dT%H:%M:%S"), end=cal.end.dt.strftime("%Y-%m-%dT%H:%M:%S")) \
       .to_csv(paths["peak_calendar"], index=False)
    for name, storage in (("S1", False), ("S2", True)):
        p = out / f"{name}.yaml"
        with p.open("w", encoding="utf-8") as fh:
            yaml.safe_dump(scenario_config(name, storage), fh, sort_keys=False)
        paths[name] = p
    return paths
