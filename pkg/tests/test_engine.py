import numpy as np
import pytest

from aqsts.engine import Engine, EngineConfig, InitializationFailure, StepFailure
from aqsts.example import constant_profiles, stress_profiles
from aqsts.profiles import MissingProfile
from aqsts.state import SystemState


def _engine(model, profiles, **cfg):
    return Engine(model, profiles, EngineConfig(resolution=profiles.resolution, **cfg))


@pytest.fixture(scope="module")
def steady(network):
    prof = constant_profiles(network, 6, 15)
    eng = _engine(network, prof)
    state, _ = eng.initialize(0)
    return prof, eng, state


@pytest.mark.parametrize("delta, expected", [(250.0, 3), (400.0, 4), (0.0, 1), (99.0, 1), (100.0, 1), (100.5, 2)])
def test_substep_count(network, steady, delta, expected):
    prof, _, state = steady
    load = network.loads[2].id
    prof = constant_profiles(network, 6, 15)
    prof.series[load][1] += delta
    eng = _engine(network, prof)
    plan = eng.plan_step(state, 1)
    assert plan.sub_steps == expected
    assert np.allclose(plan.fractions, 1.0 / expected) and plan.fractions.sum() == pytest.approx(1.0)
    assert np.max(np.abs(plan.delta_p)) == pytest.approx(delta)


def test_opposite_changes_on_one_bus_cancel(network, steady):
    _, _, state = steady
    prof = constant_profiles(network, 6, 15)
    wind = next(g for g in network.generators if g.kind.value == "wind")
    prof.series[wind.id][1] += 300.0
    assert _engine(network, prof).plan_step(state, 1).sub_steps == 3


def test_initial_state_is_balanced_and_secure(network, steady):
    _, eng, state = steady
    assert abs(state.swing_residual) <= eng.vo.thr.balance_threshold
    assert state.committed.sum() >= 1


def test_constant_profiles_are_a_fixed_point(steady):
    _, eng, s0 = steady
    s = s0
    for t in range(1, 6):
        out = eng.advance(s, t)
        assert out.actions == [] and out.concessions == []
        assert out.state.to_vector().tobytes() == s0.to_vector().tobytes()
        s = out.state


def test_replay_reproduces_every_step(network, two_week_inputs):
    from aqsts.runner import engine_inputs
    eng = engine_inputs(two_week_inputs).engine()
    s, _ = eng.initialize(0)
    rec = [s]
    for t in range(1, 48):
        rec.append(eng.advance(rec[-1], t).state)
    fresh = engine_inputs(two_week_inputs).engine()
    for t in range(47):
        assert fresh.replay(rec[t]).same_as(rec[t + 1])


def test_state_vector_round_trip(steady, network):
    _, _, s = steady
    again = SystemState.from_vector(network, s.to_vector(), s.time_index)
    assert again.same_as(s)


def test_stress_step_substeps_limit_intermediate_residual(network):
    prof = stress_profiles(network, 5)
    sub_eng = _engine(network, prof)
    full_eng = _engine(network, prof, max_injection_per_substep=1e9)
    s0, _ = sub_eng.initialize(0)
    plan = sub_eng.plan_step(s0, 1)
    assert plan.sub_steps > 1
    assert full_eng.plan_step(s0, 1).sub_steps == 1
    sub = sub_eng.advance(s0, 1)
    full = full_eng.advance(s0, 1)
    assert max(map(abs, sub.residuals)) <= max(map(abs, full.residuals))
    assert np.max(np.abs(sub.state.vm - full.state.vm)) < 1e-6
    assert np.max(np.abs(sub.state.va - full.state.va)) < 1e-6


def test_missing_profile_value(network):
    prof = constant_profiles(network, 4, 15)
    prof.series[network.loads[0].id][2] = np.nan
    eng = _engine(network, prof)
    s, _ = eng.initialize(0)
    s = eng.advance(s, 1).state
    with pytest.raises(MissingProfile):
        eng.advance(s, 2)


def test_impossible_start_raises_initialization_failure(network):
    prof = constant_profiles(network, 2, 15, level=6.0)
    with pytest.raises(InitializationFailure):
        _engine(network, prof).initialize(0)


def test_step_failure_carries_trace(network, steady):
    _, _, s = steady
    prof = constant_profiles(network, 3, 15)
    for ld in network.loads:
        prof.series[ld.id][1] *= 12.0
    with pytest.raises(StepFailure) as info:
        _engine(network, prof).advance(s, 1)
    assert info.value.t == 1 and info.value.trace_lines()
