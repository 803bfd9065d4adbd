"""
AC power flow.

Polar Newton-Raphson with an optional step multiplier, an XB fast-decoupled
variant, PV->PQ switching on reactive limits and the fallback ladder
(plain NR, damped NR, fast-decoupled, relaxed Q limits then re-tightened).
All quantities are per-unit on the system base.
"""

from __future__ import annotations

import dataclasses
import enum
from typing import Sequence

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from aqsts.network import NetworkModel


class Mode(str, enum.Enum):
    NEWTON_RAPHSON = "newton_raphson"
    FAST_DECOUPLED = "fast_decoupled"


class NonConvergence(Exception):
    def __init__(self, message: str, trace: Sequence["AttemptRecord"] = ()):
        super().__init__(message)
        self.trace = list(trace)


@dataclasses.dataclass(frozen=True)
class PowerFlowSettings:
    tolerance: float = 1e-8
    max_iterations: int = 30
    damping_schedule: tuple[float, ...] = (0.5, 0.25)
    mode: Mode = Mode.NEWTON_RAPHSON
    enforce_q_limits: bool = True
    fd_max_iterations: int = 100

    def __post_init__(self):
        if self.tolerance <= 0 or self.max_iterations < 1:
            raise ValueError("tolerance must be > 0 and max_iterations >= 1")
        if any(not 0 < m <= 1 for m in self.damping_schedule):
            raise ValueError("damping multipliers must lie in (0, 1]")
        object.__setattr__(self, "mode", Mode(self.mode))


@dataclasses.dataclass
class PowerFlowCase:
    """Everything the numerical kernel needs for one solve.

    ``s_spec`` carries specified injections (P for PV buses, P and Q for PQ
    buses). ``q_fixed`` is the non-controllable reactive injection at each
    bus, used to turn a computed bus Q into generator Q at PV buses.
    """

    ybus: np.ndarray
    s_spec: np.ndarray
    v_set: np.ndarray
    ref: np.ndarray
    pv: np.ndarray
    pq: np.ndarray
    q_fixed: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray

    @property
    def n(self) -> int:
        return self.ybus.shape[0]


@dataclasses.dataclass
class AttemptRecord:
    rung: str
    converged: bool
    iterations: int
    mismatch: list[float]

    def as_line(self) -> str:
        tail = " ".join(f"{m:.3e}" for m in self.mismatch)
        return f"{self.rung} converged={self.converged} iterations={self.iterations} mismatch=[{tail}]"


@dataclasses.dataclass
class PowerFlowResult:
    converged: bool
    iterations: int
    vm: np.ndarray
    va: np.ndarray
    p: np.ndarray
    q: np.ndarray
    max_mismatch: float
    pv: np.ndarray
    pq: np.ndarray
    q_limited: list[int] = dataclasses.field(default_factory=list)
    rung: str = "newton"
    trace: list[AttemptRecord] = dataclasses.field(default_factory=list)
    diagnostics: list = dataclasses.field(default_factory=list)
    fictitious_q: dict = dataclasses.field(default_factory=dict)

    @property
    def v(self) -> np.ndarray:
        return self.vm * np.exp(1j * self.va)


def _mismatch(ybus, v, s_spec):
    return v * np.conj(ybus @ v) - s_spec


def _polar(initial) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(initial, tuple):
        vm, va = initial
        return np.array(vm, dtype=float), np.array(va, dtype=float)
    v0 = np.asarray(initial, dtype=complex)
    return np.abs(v0), np.angle(v0)


def newton(case: PowerFlowCase, vm0: np.ndarray, va0: np.ndarray, tol: float, max_it: int, step: float = 1.0,
           pv: np.ndarray | None = None, pq: np.ndarray | None = None,
           s_spec: np.ndarray | None = None) -> tuple[bool, int, np.ndarray, np.ndarray, list[float]]:
    """Polar Newton-Raphson.

    ``iterations`` counts mismatch evaluations, so a start point that already
    satisfies the tolerance reports one iteration and is returned unchanged.
    """
    ybus = case.ybus
    pv = case.pv if pv is None else pv
    pq = case.pq if pq is None else pq
    s = case.s_spec if s_spec is None else s_spec
    pvpq = np.concatenate([pv, pq])
    npvpq = pvpq.size
    vm, va = vm0.copy(), va0.copy()
    v = vm * np.exp(1j * va)
    history = []
    for it in range(1, max_it + 1):
        mis = _mismatch(ybus, v, s)
        f = np.concatenate([mis.real[pvpq], mis.imag[pq]])
        norm = float(np.max(np.abs(f))) if f.size else 0.0
        history.append(norm)
        if not np.isfinite(norm) or norm > 1e8:
            return False, it, vm, va, history
        if norm < tol:
            return True, it, vm, va, history
        ibus = ybus @ v
        vnorm = v / vm
        ds_dvm = v[:, None] * np.conj(ybus * vnorm[None, :])
        ds_dvm[np.diag_indices_from(ds_dvm)] += np.conj(ibus) * vnorm
        ds_dva = -1j * v[:, None] * np.conj(ybus * v[None, :])
        ds_dva[np.diag_indices_from(ds_dva)] += 1j * v * np.conj(ibus)
        jac = np.block([[ds_dva.real[np.ix_(pvpq, pvpq)], ds_dvm.real[np.ix_(pvpq, pq)]],
                        [ds_dva.imag[np.ix_(pq, pvpq)], ds_dvm.imag[np.ix_(pq, pq)]]])
        try:
            dx = np.linalg.solve(jac, -f)
        except np.linalg.LinAlgError:
            return False, it, vm, va, history
        va[pvpq] += step * dx[:npvpq]
        vm[pq] += step * dx[npvpq:]
        if np.any(vm[pq] <= 0):
            return False, it, vm, va, history
        v = vm * np.exp(1j * va)
    return False, max_it, vm, va, history


def fast_decoupled(case: PowerFlowCase, vm0: np.ndarray, va0: np.ndarray, tol: float, max_it: int,
                   pv: np.ndarray | None = None, pq: np.ndarray | None = None,
                   s_spec: np.ndarray | None = None) -> tuple[bool, int, np.ndarray, np.ndarray, list[float]]:
    """XB fast-decoupled load flow with constant B' and B''."""
    ybus = case.ybus
    pv = case.pv if pv is None else pv
    pq = case.pq if pq is None else pq
    s = case.s_spec if s_spec is None else s_spec
    pvpq = np.concatenate([pv, pq])
    bp = lu_factor(_b_prime(ybus)[np.ix_(pvpq, pvpq)]) if pvpq.size else None
    bpp = lu_factor(-ybus.imag[np.ix_(pq, pq)]) if pq.size else None
    vm, va = vm0.copy(), va0.copy()
    v = vm * np.exp(1j * va)
    history = []
    for it in range(1, max_it + 1):
        raw = _mismatch(ybus, v, s)
        f = np.concatenate([raw.real[pvpq], raw.imag[pq]])
        norm = float(np.max(np.abs(f))) if f.size else 0.0
        history.append(norm)
        if not np.isfinite(norm) or norm > 1e8:
            return False, it, vm, va, history
        if norm < tol:
            return True, it, vm, va, history
        if bp is not None:
            va[pvpq] -= lu_solve(bp, raw.real[pvpq] / vm[pvpq])
            v = vm * np.exp(1j * va)
        if bpp is not None:
            mis = _mismatch(ybus, v, s) / vm
            vm[pq] -= lu_solve(bpp, mis.imag[pq])
            if np.any(vm[pq] <= 0):
                return False, it, vm, va, history
            v = vm * np.exp(1j * va)
    return False, max_it, vm, va, history


def _b_prime(ybus: np.ndarray) -> np.ndarray:
    # series reactances only: resistance, charging, shunts and off-nominal taps dropped
    off = ybus.copy()
    np.fill_diagonal(off, 0.0)
    nz = off != 0
    bp = np.zeros(off.shape)
    bp[nz] = -1.0 / np.imag(-1.0 / off[nz])
    np.fill_diagonal(bp, -bp.sum(axis=1))
    return bp


def _injections(ybus, vm, va):
    v = vm * np.exp(1j * va)
    s = v * np.conj(ybus @ v)
    return s.real, s.imag


@dataclasses.dataclass
class _Outcome:
    ok: bool
    iterations: int
    vm: np.ndarray
    va: np.ndarray
    history: list[float]
    pv: np.ndarray
    pq: np.ndarray
    limited: list[int]


def _run(case: PowerFlowCase, vm0: np.ndarray, va0: np.ndarray, settings: PowerFlowSettings, solver: str,
         step: float, enforce: bool) -> _Outcome:
    """One rung, including the PV->PQ outer loop."""
    pv, pq = case.pv.copy(), case.pq.copy()
    s = case.s_spec.copy()
    vm, va = vm0.copy(), va0.copy()
    vm[case.pv] = case.v_set[case.pv]
    vm[case.ref] = case.v_set[case.ref]
    limited: list[int] = []
    total_it = 0
    history: list[float] = []
    for _ in range(case.pv.size + 1):
        if solver == "fd":
            ok, it, vm, va, hist = fast_decoupled(case, vm, va, settings.tolerance, settings.fd_max_iterations, pv, pq, s)
        else:
            ok, it, vm, va, hist = newton(case, vm, va, settings.tolerance, settings.max_iterations, step, pv, pq, s)
        total_it += it
        history += hist
        if not ok:
            return _Outcome(False, total_it, vm, va, history, pv, pq, limited)
        if not enforce or pv.size == 0:
            break
        _, qcalc = _injections(case.ybus, vm, va)
        qgen = qcalc[pv] - case.q_fixed[pv]
        over = qgen > case.q_max[pv] + 1e-9
        under = qgen < case.q_min[pv] - 1e-9
        if not (over.any() or under.any()):
            break
        hit = pv[over | under]
        s[pv[over]] = s[pv[over]].real + 1j * (case.q_fixed[pv[over]] + case.q_max[pv[over]])
        s[pv[under]] = s[pv[under]].real + 1j * (case.q_fixed[pv[under]] + case.q_min[pv[under]])
        limited += hit.tolist()
        pv = np.setdiff1d(pv, hit)
        pq = np.sort(np.concatenate([pq, hit]))
    return _Outcome(True, total_it, vm, va, history, pv, pq, limited)


def _result(case: PowerFlowCase, out: _Outcome, rung: str, trace: list[AttemptRecord]) -> PowerFlowResult:
    p, q = _injections(case.ybus, out.vm, out.va)
    return PowerFlowResult(out.ok, out.iterations, out.vm, out.va, p, q,
                           out.history[-1] if out.history else 0.0, out.pv, out.pq, out.limited, rung, trace)


def solve(case: PowerFlowCase, initial, settings: PowerFlowSettings = PowerFlowSettings()) -> PowerFlowResult:
    """Single attempt with the configured method; never raises on divergence.

    ``initial`` is either a complex voltage vector or a ``(vm, va)`` pair.
    """
    solver = "fd" if settings.mode is Mode.FAST_DECOUPLED else "nr"
    out = _run(case, *_polar(initial), settings, solver, 1.0, settings.enforce_q_limits)
    return _result(case, out, settings.mode.value, [AttemptRecord(settings.mode.value, out.ok, out.iterations, out.history)])


def solve_with_fallbacks(case: PowerFlowCase, initial,
                         settings: PowerFlowSettings = PowerFlowSettings()) -> PowerFlowResult:
    """Try plain NR, damped NR, fast-decoupled, then relaxed-then-tightened Q limits.

    Raises :class:`NonConvergence` carrying the attempt trace when every rung fails.
    """
    vm0, va0 = _polar(initial)
    trace: list[AttemptRecord] = []
    enforce = settings.enforce_q_limits
    slow = dataclasses.replace(settings, max_iterations=settings.max_iterations * 4)
    rungs = [("newton", "nr", 1.0)]
    rungs += [(f"damped_{m:g}", "nr", m) for m in settings.damping_schedule]
    rungs.append(("fast_decoupled", "fd", 1.0))
    for name, solver, step in rungs:
        out = _run(case, vm0, va0, slow if step < 1 else settings, solver, step, enforce)
        trace.append(AttemptRecord(name, out.ok, out.iterations, out.history))
        if out.ok:
            return _result(case, out, name, trace)

    # relax reactive limits, then re-tighten from the relaxed solution
    step = min(settings.damping_schedule, default=1.0)
    out = _run(case, vm0, va0, slow, "nr", step, False)
    trace.append(AttemptRecord("q_relaxed", out.ok, out.iterations, out.history))
    if out.ok and enforce:
        again = _run(case, out.vm, out.va, settings, "nr", 1.0, True)
        trace.append(AttemptRecord("q_retightened", again.ok, again.iterations, again.history))
        again.iterations += out.iterations
        again.history = out.history + again.history
        out = again
    if out.ok:
        return _result(case, out, "q_relaxed", trace)
    raise NonConvergence("power flow failed on every fallback rung", trace)


# -- post-processing ---------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class SecurityViolation:
    kind: str          # overvoltage | undervoltage | thermal | q_limit
    element: str
    value: float
    limit: float

    @property
    def magnitude(self) -> float:
        return abs(self.value - self.limit)


def branch_flows(model: NetworkModel, vm: np.ndarray, va: np.ndarray, branch_status: np.ndarray,
                 tap_positions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Complex from/to end power (pu) for lines and transformers.

    Out-of-service lines report zero flow.
    """
    lay = model.layout
    v = vm * np.exp(1j * va)
    on = np.asarray(branch_status, dtype=bool)
    vf, vt = v[lay.br_f], v[lay.br_t]
    ys, bc = lay.br_ys, lay.br_b
    i_f = (ys + 0.5j * bc) * vf - ys * vt
    i_t = (ys + 0.5j * bc) * vt - ys * vf
    sf_l = np.where(on, vf * np.conj(i_f), 0.0)
    st_l = np.where(on, vt * np.conj(i_t), 0.0)
    if len(lay.tr_f):
        ratio = 1.0 + np.asarray(tap_positions) * lay.tr_step
        vf, vt = v[lay.tr_f], v[lay.tr_t]
        ys = lay.tr_ys
        i_f = ys / ratio**2 * vf - ys / ratio * vt
        i_t = ys * vt - ys / ratio * vf
        sf_t, st_t = vf * np.conj(i_f), vt * np.conj(i_t)
    else:
        sf_t = st_t = np.zeros(0, dtype=complex)
    return sf_l, st_l, sf_t, st_t


def branch_losses(model: NetworkModel, vm, va, branch_status, tap_positions) -> float:
    """Total series I^2 R loss in MW."""
    sf_l, st_l, sf_t, st_t = branch_flows(model, vm, va, branch_status, tap_positions)
    pu = float(np.sum((sf_l + st_l).real) + np.sum((sf_t + st_t).real))
    return pu * model.system_base_mva


def check_security(model: NetworkModel, vm: np.ndarray, va: np.ndarray, branch_status: np.ndarray,
                   tap_positions: np.ndarray, gen_q: np.ndarray | None = None,
                   committed: np.ndarray | None = None, tol: float = 1e-9) -> list[SecurityViolation]:
    """Voltage, thermal and generator reactive-limit violations (MVA / MVAr / pu)."""
    out = []
    for i, b in enumerate(model.buses):
        if vm[i] > b.v_max + tol:
            out.append(SecurityViolation("overvoltage", b.id, float(vm[i]), b.v_max))
        elif vm[i] < b.v_min - tol:
            out.append(SecurityViolation("undervoltage", b.id, float(vm[i]), b.v_min))
    base = model.system_base_mva
    sf_l, st_l, sf_t, st_t = branch_flows(model, vm, va, branch_status, tap_positions)
    for k, br in enumerate(model.branches):
        flow = max(abs(sf_l[k]), abs(st_l[k])) * base
        if flow > br.thermal_limit + tol:
            out.append(SecurityViolation("thermal", br.id, float(flow), br.thermal_limit))
    for k, tr in enumerate(model.transformers):
        flow = max(abs(sf_t[k]), abs(st_t[k])) * base
        if flow > tr.thermal_limit + tol:
            out.append(SecurityViolation("thermal", tr.id, float(flow), tr.thermal_limit))
    if gen_q is not None:
        on = np.ones(len(model.generators), dtype=bool) if committed is None else committed
        for k, g in enumerate(model.generators):
            if not on[k]:
                continue
            if gen_q[k] > g.q_max + 1e-6:
                out.append(SecurityViolation("q_limit", g.id, float(gen_q[k]), g.q_max))
            elif gen_q[k] < g.q_min - 1e-6:
                out.append(SecurityViolation("q_limit", g.id, float(gen_q[k]), g.q_min))
    return out
