import dataclasses

import numpy as np
import pytest

from aqsts.engine import Engine, EngineConfig
from aqsts.example import constant_profiles
from aqsts.powerflow import (Mode, NonConvergence, PowerFlowSettings, branch_losses, check_security,
                             solve, solve_with_fallbacks)
from aqsts.state import GridSolver
from oracles import case_from_lines, gauss_seidel, small_cases


def _flat(case):
    return np.ones(case.n), np.zeros(case.n)


@pytest.fixture(scope="module")
def bundled_state(network):
    eng = Engine(network, constant_profiles(network, 4, 15), EngineConfig(resolution=15))
    state, _ = eng.initialize(0)
    return state


@pytest.mark.parametrize("name", list(small_cases()))
@pytest.mark.parametrize("mode", [Mode.NEWTON_RAPHSON, Mode.FAST_DECOUPLED])
def test_matches_gauss_seidel(name, mode):
    case = small_cases()[name]
    vm, va, _ = gauss_seidel(case)
    res = solve(case, _flat(case), PowerFlowSettings(tolerance=1e-10, mode=mode))
    assert res.converged
    assert np.max(np.abs(res.vm - vm)) < 1e-6
    assert np.max(np.abs(res.va - va)) < 1e-6


def test_bundled_network_matches_gauss_seidel(network, bundled_state):
    case = GridSolver(network).case(bundled_state)
    vm, va, _ = gauss_seidel(case, accel=1.6)
    res = solve(case, _flat(case), PowerFlowSettings(tolerance=1e-10))
    assert res.converged and not res.q_limited
    assert np.max(np.abs(res.vm - vm)) < 1e-6
    assert np.max(np.abs(res.va - va)) < 1e-6


def test_conservation_residual():
    for case in small_cases().values():
        res = solve(case, _flat(case), PowerFlowSettings(tolerance=1e-10))
        mis = res.v * np.conj(case.ybus @ res.v) - case.s_spec
        pvpq = np.concatenate([case.pv, case.pq])
        assert np.abs(mis.real[pvpq]).max() < 1e-8
        assert np.abs(mis.imag[case.pq]).max() < 1e-8


def test_flat_start_already_solved_reports_one_iteration():
    case = small_cases()["triangle"]
    first = solve(case, _flat(case), PowerFlowSettings(tolerance=1e-10))
    again = solve(case, (first.vm, first.va), PowerFlowSettings(tolerance=1e-10))
    assert again.iterations == 1
    assert np.array_equal(again.vm, first.vm)


def test_q_limit_converts_pv_to_pq():
    case = small_cases()["triangle"]
    free = solve(case, _flat(case), PowerFlowSettings(tolerance=1e-10))
    q_need = free.q[1] - case.q_fixed[1]
    tight = dataclasses.replace(case, q_max=np.where(np.arange(3) == 1, q_need / 2, np.inf),
                                q_min=np.full(3, -np.inf))
    res = solve(tight, _flat(tight), PowerFlowSettings(tolerance=1e-10))
    assert res.converged and res.q_limited == [1]
    assert res.q[1] == pytest.approx(q_need / 2, abs=1e-8)
    assert res.vm[1] < case.v_set[1]


def test_fallback_ladder_records_every_rung_on_failure():
    case = case_from_lines(2, [(0, 1, 0.01, 0.1, 0.0)], [0, -40.0 - 20j], [1.0, 1.0], 0, [])
    with pytest.raises(NonConvergence) as info:
        solve_with_fallbacks(case, _flat(case), PowerFlowSettings(max_iterations=10, fd_max_iterations=10))
    rungs = [a.rung for a in info.value.trace]
    assert rungs[:4] == ["newton", "damped_0.5", "damped_0.25", "fast_decoupled"]
    assert "q_relaxed" in rungs
    assert all(not a.converged for a in info.value.trace)


def test_fallback_returns_first_successful_rung():
    case = small_cases()["wscc_9"]
    res = solve_with_fallbacks(case, _flat(case))
    assert res.rung == "newton" and [a.rung for a in res.trace] == ["newton"]


def test_loss_formulas_agree(network, bundled_state):
    g = GridSolver(network)
    s = bundled_state
    assert g.injection_losses(s) == pytest.approx(g.branch_losses(s), abs=1e-6)
    assert g.branch_losses(s) == branch_losses(network, s.vm, s.va, s.branch_status, s.taps)
    assert g.injection_losses(s) > 0


def test_security_check_flags_voltage_and_thermal(network, bundled_state):
    s = bundled_state
    assert check_security(network, s.vm, s.va, s.branch_status, s.taps, s.gen_q, s.committed) == []
    vm = s.vm.copy()
    vm[0] = 1.2
    kinds = {v.kind for v in check_security(network, vm, s.va, s.branch_status, s.taps)}
    assert "overvoltage" in kinds
    va = s.va.copy()
    va[network.bus_index["W_735A"]] += 0.5
    assert any(v.kind == "thermal" for v in check_security(network, s.vm, va, s.branch_status, s.taps))


def test_settings_reject_bad_values():
    with pytest.raises(ValueError):
        PowerFlowSettings(tolerance=0)
    with pytest.raises(ValueError):
        PowerFlowSettings(damping_schedule=(1.5,))
