import itertools

import numpy as np
import pytest

from aqsts.engine import Engine, EngineConfig
from aqsts.example import constant_profiles
from aqsts.operator import (LOWER, RAISE, OperatorThresholds, StepContext, allocate_imbalance, agc_reserve,
                            best_shunt_combination, equalize_deviation)
from aqsts.state import device_slot


def _scenario(network, change):
    prof = constant_profiles(network, 3, 15)
    change(prof)
    eng = Engine(network, prof, EngineConfig(resolution=15))
    s0, _ = eng.initialize(0)
    return eng, s0, eng.advance(s0, 1)


def _scale_loads(network, factor):
    def change(prof):
        for ld in network.loads:
            prof.series[ld.id][1:] *= factor
    return change


def _kinds(outcome):
    return [a.kind.value for a in outcome.actions]


# -- pure helpers --------------------------------------------------------------------

def test_allocation_is_proportional_to_margin():
    alloc, rest = allocate_imbalance(30.0, [10.0, 20.0, 30.0], [np.inf] * 3)
    assert np.allclose(alloc, [5.0, 10.0, 15.0]) and rest == 0.0


def test_allocation_reoffers_capped_share():
    alloc, rest = allocate_imbalance(30.0, [10.0, 20.0, 30.0], [1.0, np.inf, np.inf])
    assert alloc[0] == pytest.approx(1.0)
    assert alloc.sum() == pytest.approx(30.0) and rest == 0.0
    assert alloc[2] / alloc[1] == pytest.approx(1.5)


def test_allocation_reports_remainder():
    alloc, rest = allocate_imbalance(100.0, [10.0, 20.0], [5.0, 50.0])
    assert np.allclose(alloc, [5.0, 20.0]) and rest == pytest.approx(75.0)


def test_equalize_deviation():
    opt = np.array([300.0, 320.0, 200.0])
    lo, hi = np.array([40.0, 40.0, 150.0]), np.array([450.0, 450.0, 250.0])
    p = equalize_deviation(900.0, opt, lo, hi)
    assert p.sum() == pytest.approx(900.0)
    dev = p - opt
    free = (p > lo) & (p < hi)
    assert np.allclose(dev[free], dev[free][0])
    assert np.array_equal(equalize_deviation(1e6, opt, lo, hi), hi)


def _brute_shunts(q, rows, v):
    best = None
    for combo in itertools.product(*[range(lo, hi + 1) for _, _, _, lo, hi in rows]):
        got = sum((n - cur) * st for n, (_, st, cur, _, _) in zip(combo, rows)) * v * v
        moves = sum(abs(n - cur) for n, (_, _, cur, _, _) in zip(combo, rows))
        if best is None or (abs(q - got), moves) < (abs(q - best[1]), best[2]):
            best = (combo, got, moves)
    return best


def test_shunt_choice_matches_exhaustive_search():
    rng = np.random.default_rng(11)
    for _ in range(200):
        rows = sorted([(f"S{k}", float(rng.choice([-1, 1]) * rng.integers(5, 40)), 0, 0, int(rng.integers(1, 4)))
                       for k in range(3)])
        rows = [(i, st, int(rng.integers(0, hi + 1)), 0, hi) for i, st, _, _, hi in rows]
        q = float(rng.uniform(-120, 120))
        v = float(rng.uniform(0.95, 1.05))
        steps, got = best_shunt_combination(q, rows, v)
        combo, ref, moves = _brute_shunts(q, rows, v)
        assert abs(abs(q - got) - abs(q - ref)) < 1e-6
        assert sum(abs(steps[i] - cur) for i, _, cur, _, _ in rows) == moves


def test_agc_reserve(network):
    p = np.array([g.p_max - 10.0 if g.agc_participant else 0.0 for g in network.generators])
    on = np.array([g.agc_participant for g in network.generators])
    assert agc_reserve(network, p, on) == pytest.approx(10.0 * on.sum())


def test_thresholds_validated():
    with pytest.raises(ValueError):
        OperatorThresholds(balance_threshold=0)
    OperatorThresholds(high_deadband=0.0)


# -- cooldown --------------------------------------------------------------------------

def test_cooldown_semantics(network):
    eng = Engine(network, constant_profiles(network, 2, 15), EngineConfig(resolution=15))
    s, _ = eng.initialize(0)
    vo = eng.vo
    slot = device_slot(network, "shunt", 0)
    assert vo.allowed(s, slot, 10, RAISE)
    vo.mark(s, slot, 10, RAISE)
    assert vo.allowed(s, slot, 10, RAISE)             # same step, same direction
    assert not vo.allowed(s, slot, 10, LOWER)         # never reverses within a step
    assert not vo.allowed(s, slot, 11, RAISE)         # cooling down
    assert vo.allowed(s, slot, 11, LOWER)             # a different trigger direction may act
    assert vo.allowed(s, slot, 10 + vo.thr.switching_cooldown, RAISE)


# -- rule firing on the bundled network ----------------------------------------------------

def test_balance_restores_swing_schedule(network):
    eng, _, out = _scenario(network, _scale_loads(network, 1.12))
    assert _kinds(out) == ["gen_redispatch"]
    assert out.actions[0].trigger.startswith("swing residual +")
    assert abs(out.state.swing_residual) < eng.vo.thr.balance_threshold


def test_dguoo_stops_a_unit_on_low_load(network):
    _, s0, out = _scenario(network, _scale_loads(network, 0.75))
    assert "gen_stop" in _kinds(out)
    assert out.state.committed.sum() == s0.committed.sum() - 1


def test_dguoo_and_reserve_start_units_on_high_load(network):
    eng, s0, out = _scenario(network, _scale_loads(network, 1.4))
    triggers = [a.trigger for a in out.actions if a.kind.value == "gen_start"]
    assert any(t.startswith("dguoo") for t in triggers)
    assert eng.vo.reserve(out.state) >= eng.vo.thr.agc_reserve_min - 1e-6
    assert np.max(eng.vo.dguoo(out.state)) <= eng.vo.thr.dguoo_band + 1e-6


def test_low_voltage_switches_shunts_then_taps(network):
    ld = network.loads[3]

    def change(prof):
        prof.series[ld.id + ".q"] = np.r_[ld.q_mvar, [ld.q_mvar + 800.0] * 2]
    _, _, out = _scenario(network, change)
    kinds = _kinds(out)
    assert kinds[0] == "shunt_switch" and "tap_step" in kinds
    assert all(a.trigger == f"{ld.bus} undervoltage" for a in out.actions)
    bus = network.bus_index[ld.bus]
    assert out.state.vm[bus] >= network.buses[bus].v_min


def test_high_voltage_steps_taps(network):
    ld = network.loads[3]

    def change(prof):
        prof.series[ld.id + ".q"] = np.r_[ld.q_mvar, [-250.0] * 2]
    _, _, out = _scenario(network, change)
    assert set(_kinds(out)) == {"tap_step"}
    bus = network.bus_index[ld.bus]
    assert out.state.vm[bus] <= network.buses[bus].v_max + 1e-9


def test_step_context_logs_sub_step():
    ctx = StepContext(5, 15, None)
    ctx.sub_step = 2
    ctx.note(kind="x", value=1.0)
    assert ctx.diagnostics == [{"step": 5, "sub_step": 2, "kind": "x", "value": 1.0}]
