import dataclasses

import numpy as np
import pytest

from aqsts.analyzer import losses
from aqsts.runner import engine_inputs, simulate
from aqsts.scheduler import (Initialization, OverlapDetected, RunPlan, SegmentSpec, execute, make_plan, merge,
                             partition, run_segment)
from conftest import example_inputs


def test_partition_annual_five_minute():
    segs = partition(105120, 5)
    assert len(segs) == 52
    assert all(s.n_steps == 2016 for s in segs[:-1])
    assert segs[-1].n_steps == 2304 and segs[-1].t1 == 105120
    assert segs[0].warm_in_steps == 0 and all(s.warm_in_steps == 12 for s in segs[1:])


def test_partition_two_weeks_hourly():
    segs = partition(336, 60)
    assert [(s.t0, s.t1) for s in segs] == [(0, 168), (168, 336)]


def test_partition_short_horizon_is_one_segment():
    segs = partition(100, 60, start=5)
    assert [(s.t0, s.t1) for s in segs] == [(5, 105)]


def test_sequential_partition_chains_after_the_first():
    segs = partition(336, 60, mode="sequential")
    assert [s.initialization for s in segs] == [Initialization.BASE_CASE, Initialization.CHAINED]
    assert segs[1].warm_in_steps == 0


def test_plan_validation():
    with pytest.raises(ValueError):
        RunPlan((), worker_count=0)
    with pytest.raises(ValueError):
        RunPlan((), mode="random")
    with pytest.raises(ValueError):
        SegmentSpec(0, 5, 5)


@pytest.fixture(scope="module")
def runs(two_week_inputs):
    par1, _ = simulate(two_week_inputs, plan=make_plan(336, 60, "parallel", 1))
    par2, _ = simulate(two_week_inputs, plan=make_plan(336, 60, "parallel", 2))
    seq, _ = simulate(two_week_inputs, plan=make_plan(336, 60, "sequential", 1))
    return par1, par2, seq


def test_parallel_store_independent_of_worker_count(runs):
    par1, par2, _ = runs
    assert par1.same_as(par2)


def test_sequential_and_parallel_agree(runs):
    par, _, seq = runs
    assert np.array_equal(par.steps, seq.steps) and par.n_steps == 336
    dv = np.abs(par.block("bus", "vm") - seq.block("bus", "vm")).max()
    assert dv < 1e-3
    a, b = losses(par).mean, losses(seq).mean
    assert abs(a - b) / b < 5e-3


def test_segment_metadata(runs):
    par, _, seq = runs
    assert [s["initialization"] for s in par.segments] == ["base_case", "base_case"]
    assert [s["initialization"] for s in seq.segments] == ["base_case", "chained"]
    assert set(par.entries) == {0, 168}
    assert not par.failures


def test_merge_rejects_overlap(two_week_inputs):
    eng = engine_inputs(two_week_inputs).engine()
    a = run_segment(eng, SegmentSpec(0, 0, 6))
    b = run_segment(eng, SegmentSpec(1, 4, 8, warm_in_steps=2))
    with pytest.raises(OverlapDetected):
        merge([a, b], two_week_inputs.model, 60)
    c = run_segment(eng, SegmentSpec(1, 6, 8, warm_in_steps=2))
    assert merge([c, a], two_week_inputs.model, 60).steps.tolist() == list(range(8))


@pytest.fixture(scope="module")
def broken_inputs(tmp_path_factory, network):
    from aqsts.example import build_profiles
    prof = build_profiles(14, 5, model=network)
    hour = slice(200 * 12, 201 * 12)     # hourly step 200 in 5-min samples
    for ld in network.loads:
        prof.series[ld.id][hour] *= 12.0
    return example_inputs(tmp_path_factory.mktemp("broken"), days=14, resolution=60, profiles=prof)


def test_failed_segment_is_recorded_and_others_complete(broken_inputs):
    store, _ = simulate(broken_inputs, plan=make_plan(336, 60, "parallel", 1))
    assert len(store.failures) == 1
    f = store.failures[0]
    assert f["segment"] == 1 and f["step"] == 200 and f["trace"]
    assert store.segments[0]["complete"] and not store.segments[1]["complete"]
    assert store.steps[-1] == 199


def test_sequential_falls_back_after_failure(broken_inputs):
    inputs = broken_inputs
    three = make_plan(336, 60, "sequential", 1)
    specs = list(three.segments)
    # split the second week so a third segment follows the failure
    specs[1:] = [dataclasses.replace(specs[1], t1=250), SegmentSpec(2, 250, 336, Initialization.CHAINED, 0)]
    store = execute(RunPlan(tuple(specs), 1, "sequential"), engine_inputs(inputs))
    assert store.segments[2]["initialization"] == "base_case"
    assert store.segments[2]["warm_in_steps"] == 12 and store.segments[2]["complete"]


def test_in_loop_storage_matches_standalone_controller(two_week_inputs):
    from aqsts import ess as E
    from aqsts.config import zone_wind
    inp = two_week_inputs
    store, _ = simulate(inp, plan=make_plan(336, 60, "sequential", 1))
    prof = inp.profiles.resample(60)
    traces, _ = E.simulate(inp.model.ess, zone_wind(inp.model, prof), inp.ess.limits, inp.ess.period_of_step,
                           inp.ess.peak, 60)
    for u in inp.model.ess:
        tr = traces[u.id]
        assert tr.power[0] == 0.0          # the recorded start state carries no storage move
        e = store.ess[store.ess["unit"] == u.id].sort_values("step")
        steps = e["step"].to_numpy()
        assert np.array_equal(e["power_MW"].to_numpy(), tr.power[steps])
        assert np.array_equal(e["soc_pct"].to_numpy(), tr.soc[steps])
