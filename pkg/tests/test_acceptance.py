"""
Acceptance criteria on the bundled two-zone system.

Each ``test_criterion_NN_*`` covers one criterion; the terminal summary
prints one PASS/FAIL line per criterion with the measured figures. Run
alone with ``pytest tests/test_acceptance.py -v`` (about 15 minutes on
one core, dominated by the annual runs of criteria 6 and 7).
"""

from __future__ import annotations

import math
import time

import numpy as np
import pandas as pd
import pytest

from aqsts import analyzer as an
from aqsts import ess as E
from aqsts.config import peak_calendar_for, period_of_steps, zone_wind
from aqsts.engine import Engine, EngineConfig, EssSettings
from aqsts.example import PERIOD_START_DAYS, build_profiles, constant_profiles, peak_windows, stress_profiles
from aqsts.powerflow import PowerFlowSettings, solve
from aqsts.runner import simulate
from aqsts.scheduler import SegmentSpec, make_plan, run_segment
from aqsts.state import GridSolver, SystemState
from conftest import example_inputs
from oracles import gauss_seidel, naive_series_stats, small_cases, truth_table

YEAR_15 = 365 * 96
YEAR_5 = 365 * 288


# -- shared annual runs -------------------------------------------------------------------

@pytest.fixture(scope="module")
def annual_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("annual")


@pytest.fixture(scope="module")
def annual_inputs(annual_dir, annual_profiles):
    return example_inputs(annual_dir, days=365, resolution=15, profiles=annual_profiles)


@pytest.fixture(scope="module")
def annual_runs(annual_inputs):
    """Sequential-chained and parallel base-case runs at 15 minutes with their wall times."""
    out = {}
    for key, mode, workers in (("sequential", "sequential", 1), ("parallel_1", "parallel", 1),
                               ("parallel_8", "parallel", 8)):
        t0 = time.perf_counter()
        store, _ = simulate(annual_inputs, plan=make_plan(YEAR_15, 15, mode, workers, 12))
        out[key] = (store, time.perf_counter() - t0)
    return out


@pytest.fixture(scope="module")
def annual_ess_inputs(annual_profiles, network):
    """Standalone storage inputs at the 5-minute native resolution."""
    zones = zone_wind(network, annual_profiles)
    periods = period_of_steps(YEAR_5, 5, PERIOD_START_DAYS)
    limits = E.compute_limits(zones, periods)
    peak = peak_calendar_for(peak_windows(365), annual_profiles.start, 5)
    return zones, periods, limits, peak


# -- 1 ------------------------------------------------------------------------------------

def test_criterion_01_powerflow_matches_gauss_seidel(network, record_property):
    cases = dict(small_cases())
    eng = Engine(network, constant_profiles(network, 2, 15), EngineConfig(resolution=15))
    s, _ = eng.initialize(0)
    cases["bundled_30"] = GridSolver(network).case(s)
    settings = PowerFlowSettings()
    worst_v = worst_a = worst_res = 0.0
    nr_time = 0.0
    for name, case in cases.items():
        vm, va, _ = gauss_seidel(case, accel=1.6 if case.n > 20 else 1.0)
        t0 = time.perf_counter()
        res = solve(case, (np.ones(case.n), np.zeros(case.n)), settings)
        nr_time += time.perf_counter() - t0
        assert res.converged and not res.q_limited, name
        mis = res.v * np.conj(case.ybus @ res.v) - case.s_spec
        pvpq = np.concatenate([case.pv, case.pq])
        worst_res = max(worst_res, np.abs(mis.real[pvpq]).max(), np.abs(mis.imag[case.pq]).max(initial=0.0))
        worst_v = max(worst_v, np.abs(res.vm - vm).max())
        worst_a = max(worst_a, np.abs(res.va - va).max())
    record_property("detail", f"{len(cases)} cases (2-30 buses), max |dV| {worst_v:.1e} pu, max dd {worst_a:.1e} rad, "
                              f"residual {worst_res:.1e} pu, NR time {nr_time:.3f} s")
    assert len(cases) >= 5 and {c.n for c in cases.values()} >= {2, 30}
    assert worst_v < 1e-6 and worst_a < 1e-6
    assert worst_res < 1e-8
    assert nr_time < 1.0


# -- 2 ------------------------------------------------------------------------------------

def test_criterion_02_controller_truth_table(record_property):
    hi, lo, bal = 10.0, 2.0, 50.0
    lim = E.GenerationLimits("Z", 1, hi, lo, 6.0, 8 / 3)
    cal = E.PeakCalendar(((1, 2),), 5)
    rows = truth_table(hi, lo, bal)
    mismatches = [r[:3] for r in rows
                  if E.select_mode(r[3], lim, r[4], bal, 1 if r[1] else 0, cal).mode.value != r[5]]
    peak_standby = E.select_mode(hi + 1, lim, 10.0, bal, 1, cal)
    record_property("detail", f"{len(rows)} combinations, {len(mismatches)} mismatches, "
                              f"surplus-in-peak -> {peak_standby.mode.value}")
    assert len(rows) == 30 and not mismatches
    assert peak_standby.mode is E.Mode.STANDBY


# -- 3 ------------------------------------------------------------------------------------

def test_criterion_03_generation_limits(record_property):
    lim = E.limits_from_samples([1, 2, 3, 4, 5])
    s = math.sqrt(sum((x - 3.0) ** 2 for x in range(1, 6)) / 4)
    err = max(abs(lim.gen_max_lim - (3 + 1.5 * s)), abs(lim.gen_min_lim - (3 - 1.5 * s)))
    rng = np.random.default_rng(2035)
    base = rng.gamma(2.0, 150.0, 500)
    ref = E.limits_from_samples(base)
    worst = 0.0
    for a in 10 ** rng.uniform(-3, 3, 100):
        got = E.limits_from_samples(a * base)
        worst = max(worst, abs(got.gen_max_lim / (a * ref.gen_max_lim) - 1), abs(got.gen_min_lim / (a * ref.gen_min_lim) - 1))
    record_property("detail", f"max {lim.gen_max_lim:.4f} min {lim.gen_min_lim:.4f} (error {err:.1e}); "
                              f"100 scalings, worst relative deviation {worst:.1e}")
    assert round(lim.gen_max_lim, 4) == 5.3717 and round(lim.gen_min_lim, 4) == 0.6283
    assert err < 1e-9
    assert worst < 1e-12


# -- 4 ------------------------------------------------------------------------------------

def test_criterion_04_chaining_determinism(network, record_property):
    t0 = time.perf_counter()
    prof = build_profiles(7, 5, model=network)
    zones = zone_wind(network, prof)
    periods = period_of_steps(2016, 5, PERIOD_START_DAYS)
    ess = EssSettings(E.compute_limits(zones, periods), periods,
                      peak_calendar_for(peak_windows(7), prof.start, 5))
    eng = Engine(network, prof, EngineConfig(resolution=5), ess=ess)
    seg = run_segment(eng, SegmentSpec(0, 0, 2016))
    assert seg.complete and len(seg.steps) == 2016
    replay = Engine(network, prof, EngineConfig(resolution=5), ess=ess)
    bad = 0
    for row in range(2015):
        recorded = SystemState.from_vector(network, seg.states[row], int(seg.steps[row]))
        again = replay.advance(recorded, int(seg.steps[row]) + 1).state
        bad += again.to_vector().tobytes() != seg.states[row + 1].tobytes()

    flat = Engine(network, constant_profiles(network, 50, 5), EngineConfig(resolution=5))
    s0, _ = flat.initialize(0)
    s, actions, moved = s0, 0, 0
    for t in range(1, 50):
        out = flat.advance(s, t)
        actions += len(out.actions)
        moved += out.state.to_vector().tobytes() != s0.to_vector().tobytes()
        s = out.state
    wall = time.perf_counter() - t0
    record_property("detail", f"2016 steps, {bad} replay mismatches, {len(seg.actions)} actions in the week; "
                              f"constant profile: {moved} changed states, {actions} actions; {wall:.1f} s")
    assert bad == 0
    assert moved == 0 and actions == 0
    assert wall < 300


# -- 5 ------------------------------------------------------------------------------------

def test_criterion_05_incremental_update(network, record_property):
    prof = stress_profiles(network, 5)
    stepped = Engine(network, prof, EngineConfig(resolution=5))
    single = Engine(network, prof, EngineConfig(resolution=5, max_injection_per_substep=1e12))
    s0, _ = stepped.initialize(0)
    j = stepped.plan_step(s0, 1).sub_steps
    a = stepped.advance(s0, 1)
    b = single.advance(s0, 1)
    worst_sub = max(abs(r) for r in a.residuals)
    worst_full = max(abs(r) for r in b.residuals)
    g = GridSolver(network)
    inj_a = g.bus_p_fixed(a.state, exclude_slack_gen=False)
    inj_b = g.bus_p_fixed(b.state, exclude_slack_gen=False)
    dv = np.abs(a.state.vm - b.state.vm).max()
    da = np.abs(a.state.va - b.state.va).max()
    dp = np.abs(inj_a - inj_b).max()
    record_property("detail", f"J={j}, worst sub-step residual {worst_sub:.1f} MW vs single-step {worst_full:.1f} MW; "
                              f"endpoint |dV| {dv:.1e} pu, dd {da:.1e} rad, bus injection gap {dp:.1e} MW")
    assert j > 1
    assert worst_sub <= worst_full
    assert dv < 1e-6 and da < 1e-6
    assert dp < 1e-3                  # balance tolerance of the operator loop, in MW
    assert a.concessions == b.concessions == []


# -- 6 ------------------------------------------------------------------------------------

def test_criterion_06_parallel_sequential_consistency(annual_runs, record_property):
    seq, t_seq = annual_runs["sequential"]
    par, t_par = annual_runs["parallel_1"]
    par8, t_par8 = annual_runs["parallel_8"]
    assert not seq.failures and not par.failures
    assert np.array_equal(seq.steps, par.steps) and seq.n_steps == YEAR_15
    dv = np.abs(seq.block("bus", "vm") - par.block("bus", "vm")).max()
    l_seq, l_par = an.losses(seq), an.losses(par)
    e_seq = l_seq.per_step["injection_MW"].sum()
    e_par = l_par.per_step["injection_MW"].sum()
    rel = abs(e_par - e_seq) / e_seq
    same = par.same_as(par8)
    gap = np.abs(seq.block("bus", "vm") - par.block("bus", "vm")).max(axis=1)
    tap_diff = (seq.block("transformer", "tap") != par.block("transformer", "tap")).any(axis=1)
    over = gap > 1e-3
    on_equal = gap[~tap_diff].max(initial=0.0)
    record_property("detail", f"max |dV| {dv:.1e} pu ({over.sum()} of {len(gap)} steps over 1e-3, "
                              f"{(over & ~tap_diff).sum()} of them with identical taps; max |dV| {on_equal:.1e} pu "
                              f"where taps agree), annual loss gap {100 * rel:.4f} %, 1 vs 8 workers identical "
                              f"{same}; wall {t_seq:.0f} s sequential, {t_par:.0f} s / {t_par8:.0f} s parallel")
    assert dv < 1e-3
    assert rel < 5e-3
    assert same
    assert max(t_seq, t_par, t_par8) < 15 * 60


# -- 7 ------------------------------------------------------------------------------------

def test_criterion_07_losses_and_resolution(annual_inputs, annual_runs, record_property):
    store15, t15 = annual_runs["parallel_1"]
    summ = an.losses(store15)
    pps = an.peak_snapshot_loss(store15, summ)
    known = {15: (store15, t15)}

    def run(res):
        if res in known:
            return known[res][0]
        return simulate(annual_inputs, resolution=res, plan=make_plan(365 * 1440 // res, res, "parallel", 1))[0]

    table = an.resolution_study(run, [5, 15, 30, 60])
    table.loc[table["resolution_min"] == 15, "runtime_s"] = t15
    ref = float(table.loc[table["resolution_min"] == 5, "loss_mean_MW"].iloc[0])
    spread = (table["loss_mean_MW"] / ref - 1).abs().max()
    body = ", ".join(f"{int(r.resolution_min)} min {r.loss_mean_MW:.2f} MW ({r.runtime_s:.0f} s)"
                     for r in table.itertuples())
    record_property("detail", f"annual max loss {summ.max:.1f} MW >= peak-snapshot {pps['loss_MW']:.1f} MW; "
                              f"mean losses {body}; spread {100 * spread:.2f} %")
    assert summ.max >= pps["loss_MW"]
    assert (table["failures"] == 0).all()
    assert spread < 0.05


# -- 8 ------------------------------------------------------------------------------------

def test_criterion_08_storage_year(network, annual_ess_inputs, record_property):
    zones, periods, limits, peak = annual_ess_inputs
    traces, ledger = E.simulate(network.ess, zones, limits, periods, peak, 5)
    in_peak = peak.mask(YEAR_5)
    soc_lo, soc_hi, peak_charge, ledger_err, mass, weeks_checked = 100.0, 0.0, 0.0, 0.0, 0.0, 0
    for u in network.ess:
        tr = traces[u.id]
        soc_lo, soc_hi = min(soc_lo, tr.soc.min()), max(soc_hi, tr.soc.max())
        mit_charge = (tr.mode == "charging") & (tr.classification == E.Classification.MITIGATION.value)
        peak_charge += float(np.abs(tr.power[mit_charge & in_peak]).sum())
        charged = ledger.total(u.id, direction="charge")
        discharged = ledger.total(u.id, direction="discharge")
        stored = (tr.soc[-1] - u.soc) / 100.0 * u.energy_capacity
        ledger_err = max(ledger_err, abs(stored - (charged * u.charge_efficiency - discharged / u.discharge_efficiency)))
        trace_energy = math.fsum(np.abs(tr.power[tr.classification != "none"]) * 5 / 60)
        ledger_err = max(ledger_err, abs(trace_energy - (charged + discharged)))
        assert not tr.clipped.any()
        gen = zones[u.zone]
        hi = np.array([limits[(u.zone, int(p))].gen_max_lim for p in periods])
        net = gen + tr.power
        for w in range(YEAR_5 // 2016):
            sl = slice(w * 2016, (w + 1) * 2016)
            if (gen[sl] >= hi[sl]).any() and not tr.capped[sl].any():
                weeks_checked += 1
                mass += float(np.clip(net[sl] - hi[sl], 0.0, None).sum())
    record_property("detail", f"SOC range [{soc_lo:.2f}, {soc_hi:.2f}] %, mitigation charging in peak {peak_charge:.1f} MW, "
                              f"ledger error {ledger_err:.1e} MWh, {weeks_checked} uncapped surplus weeks with "
                              f"{mass:.1e} MW above gen_max_lim")
    assert 0.0 <= soc_lo and soc_hi <= 100.0
    assert peak_charge == 0.0
    assert ledger_err < 1e-9
    assert weeks_checked > 0 and mass <= 1e-9


# -- 9 ------------------------------------------------------------------------------------

def test_criterion_09_soc_balance_sweep(network, annual_ess_inputs, record_property):
    zones, periods, limits, peak = annual_ess_inputs
    rows = []
    for bal in (30, 40, 45, 50, 55, 60):
        _, ledger = E.simulate(network.ess, zones, limits, periods, peak, 5, soc_balance=bal)
        energy = an.ledger_frame(ledger)
        year = an.ess_utilization(energy, "year")
        week = an.ess_utilization(energy, "week")
        buckets = [c for c in year.columns if c.endswith("_MWh")]
        for _, r in year.iterrows():
            wk = week[week["unit"] == r["unit"]]
            additive = np.allclose(wk[buckets].sum().to_numpy(), r[buckets].to_numpy(dtype=float), rtol=1e-12) and \
                abs(r[buckets].sum() - ledger.total(r["unit"])) < 1e-6
            rows.append({"soc_balance": bal, "unit": r["unit"], "ratio": r["marketable_ratio"], "additive": additive})
    table = pd.DataFrame(rows)
    ratios = " ".join(f"{b}:{'/'.join(f'{x:.3f}' for x in g['ratio'])}" for b, g in table.groupby("soc_balance"))
    record_property("detail", f"{table['soc_balance'].nunique()} runs, marketable ratio per unit {ratios}, "
                              f"buckets additive {bool(table['additive'].all())}")
    assert table["soc_balance"].nunique() == 6 and len(table) == 12
    assert table["ratio"].notna().all()
    assert table["additive"].all()


# -- 10 -----------------------------------------------------------------------------------

def test_criterion_10_analyzer_identities(annual_runs, record_property):
    store, _ = annual_runs["parallel_1"]
    windows = [an.MetricWindow.year()]
    windows += [an.MetricWindow.week(w, 15) for w in range(53)]
    windows += [an.MetricWindow.seasonal(p, PERIOD_START_DAYS) for p in range(1, 6)]
    tele = pd.concat([an.telescoping_check(store, w) for w in windows], ignore_index=True)
    switching = int(store.actions["kind"].isin(list(an.SWITCH_KINDS)).sum())
    per = an.losses(store).per_step
    gap = float((per["injection_MW"] - per["branch_MW"]).abs().max())

    rng = np.random.default_rng(10)
    stat_bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 500))
        x = [rng.normal(1.0, 0.03, n), 1.0 + 0.01 * np.cumsum(rng.normal(0, 1, n)),
             rng.choice([0.93, 0.95, 1.0, 1.05, 1.07], n)][int(rng.integers(0, 3))]
        got, ref = an.series_stats(x, 0.95, 1.05), naive_series_stats(x, 0.95, 1.05)
        stat_bad += any(got[k] != ref[k] for k in ("excursions", "excursion_events", "longest_excursion"))
        stat_bad += any(abs(got[k] - ref[k]) > 1e-12 for k in ("median", "q1", "q3", "min", "max"))
    record_property("detail", f"telescoping: {len(tele)} device-window rows over {len(windows)} windows, "
                              f"{switching} switching actions, max mismatch {tele['mismatch'].abs().max():.1e}; "
                              f"loss dual-formula max gap {gap:.1e} MW over {len(per)} steps; "
                              f"series stats: {stat_bad} mismatches on 1000 series")
    assert len(tele) and (tele["mismatch"] == 0).all()
    assert gap < 1e-6
    assert stat_bad == 0


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
