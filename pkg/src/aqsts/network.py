"""
Static grid description.

Holds the immutable network data types, model validation, per-unit
conversion and the bus admittance matrix. Everything that changes during a
simulation (taps, shunt steps, line status, dispatch) lives in
:class:`aqsts.state.SystemState`; the functions here take those discrete
settings as explicit arguments.
"""

from __future__ import annotations

import dataclasses
import enum
from collections import OrderedDict
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np
import yaml
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from aqsts.ess import EssUnit


class NetworkError(Exception):
    """Raised for unusable network data."""


class IslandError(NetworkError):
    """An energized island has no reference (slack) bus."""

    def __init__(self, buses: Sequence[str]):
        self.buses = tuple(buses)
        super().__init__(f"island without slack bus: {', '.join(self.buses)}")


class BusKind(str, enum.Enum):
    SLACK = "slack"
    PV = "pv"
    PQ = "pq"


class VoltageClass(str, enum.Enum):
    LOW = "low"
    HIGH = "high"


class ShuntKind(str, enum.Enum):
    CAPACITOR = "capacitor"
    REACTOR = "reactor"


class GeneratorKind(str, enum.Enum):
    UNIT = "unit"
    COMPENSATOR = "compensator"
    WIND = "wind"


class IntertieDirection(str, enum.Enum):
    IMPORT = "import"
    EXPORT = "export"


class DemandKind(str, enum.Enum):
    INTERRUPTIBLE = "interruptible_demand"
    VOLTAGE_REDUCTION = "voltage_reduction_block"


@dataclasses.dataclass(frozen=True)
class Bus:
    id: str
    base_kv: float
    kind: BusKind = BusKind.PQ
    voltage_target: float | None = None
    v_min: float = 0.95
    v_max: float = 1.05
    voltage_class: VoltageClass | None = None
    zone: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", BusKind(self.kind))
        vclass = self.voltage_class
        if vclass is None:
            vclass = VoltageClass.LOW if self.base_kv <= 69.0 else VoltageClass.HIGH
        object.__setattr__(self, "voltage_class", VoltageClass(vclass))


@dataclasses.dataclass(frozen=True)
class Branch:
    id: str
    from_bus: str
    to_bus: str
    resistance: float
    reactance: float
    charging_susceptance: float = 0.0
    thermal_limit: float = 9999.0
    switchable: bool = False
    in_service: bool = True


@dataclasses.dataclass(frozen=True)
class Transformer:
    """Two-winding transformer with an ideal tap on the from side.

    The ratio at tap position ``k`` is ``1 + k * tap_step``.
    """

    id: str
    from_bus: str
    to_bus: str
    resistance: float
    reactance: float
    tap_min: float = 0.9
    tap_max: float = 1.1
    tap_step: float = 0.00625
    tap_position: int = 0
    regulated_bus: str | None = None
    deadband: float = 0.01
    thermal_limit: float = 9999.0

    def ratio(self, position: int | None = None) -> float:
        pos = self.tap_position if position is None else position
        return 1.0 + pos * self.tap_step

    @property
    def position_bounds(self) -> tuple[int, int]:
        lo = int(np.ceil((self.tap_min - 1.0) / self.tap_step - 1e-9))
        hi = int(np.floor((self.tap_max - 1.0) / self.tap_step + 1e-9))
        return lo, hi


@dataclasses.dataclass(frozen=True)
class ShuntBank:
    id: str
    bus: str
    kind: ShuntKind
    step_mvar: float
    steps_total: int
    steps_on: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", ShuntKind(self.kind))

    @property
    def sign(self) -> float:
        return 1.0 if self.kind is ShuntKind.CAPACITOR else -1.0


@dataclasses.dataclass(frozen=True)
class Generator:
    id: str
    bus: str
    p_min: float = 0.0
    p_max: float = 0.0
    q_min: float = -9999.0
    q_max: float = 9999.0
    ramp_up: float = 9999.0
    ramp_down: float = 9999.0
    agc_participant: bool = False
    optimal_dispatch: float = 0.0
    committed: bool = True
    startup_priority: int = 0
    kind: GeneratorKind = GeneratorKind.UNIT
    zone: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", GeneratorKind(self.kind))

    @property
    def regulates_voltage(self) -> bool:
        return self.kind is not GeneratorKind.WIND


@dataclasses.dataclass(frozen=True)
class Load:
    id: str
    bus: str
    p_mw: float
    q_mvar: float = 0.0
    zone: str | None = None


@dataclasses.dataclass(frozen=True)
class Intertie:
    id: str
    bus: str
    direction: IntertieDirection
    schedule_limit_min: float
    schedule_limit_max: float
    current_schedule: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "direction", IntertieDirection(self.direction))

    @property
    def sign(self) -> float:
        """Injection sign at the bus: imports inject, exports withdraw."""
        return 1.0 if self.direction is IntertieDirection.IMPORT else -1.0


@dataclasses.dataclass(frozen=True)
class DemandResource:
    id: str
    bus: str
    kind: DemandKind
    capacity: float
    activation_delay: int = 0
    max_duration: int = 12
    active: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", DemandKind(self.kind))


@dataclasses.dataclass(frozen=True)
class Violation:
    kind: str
    element: str
    message: str


@dataclasses.dataclass
class ValidationReport:
    violations: list[Violation] = dataclasses.field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, kind: str, element: str, message: str) -> None:
        self.violations.append(Violation(kind, element, message))

    def __len__(self) -> int:
        return len(self.violations)

    def __iter__(self):
        return iter(self.violations)

    def __str__(self) -> str:
        if self.ok:
            return "model valid"
        return "\n".join(f"[{v.kind}] {v.element}: {v.message}" for v in self.violations)


@dataclasses.dataclass(frozen=True)
class NetworkModel:
    name: str
    system_base_mva: float
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...] = ()
    transformers: tuple[Transformer, ...] = ()
    shunts: tuple[ShuntBank, ...] = ()
    generators: tuple[Generator, ...] = ()
    loads: tuple[Load, ...] = ()
    ess: tuple[EssUnit, ...] = ()
    interties: tuple[Intertie, ...] = ()
    demand_resources: tuple[DemandResource, ...] = ()
    zones: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("buses", "branches", "transformers", "shunts", "generators", "loads",
                     "ess", "interties", "demand_resources", "zones"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    # dataclass eq/hash would walk every element; identity is what callers need
    __hash__ = object.__hash__

    def __eq__(self, other):
        return self is other

    def __getstate__(self):
        # compiled layout and caches are rebuilt lazily in worker processes
        return {k: v for k, v in self.__dict__.items() if k not in ("bus_index", "layout")}

    @cached_property
    def bus_index(self) -> dict[str, int]:
        return {b.id: i for i, b in enumerate(self.buses)}

    @cached_property
    def layout(self) -> "Layout":
        return Layout(self)

    def zone_of_bus(self, bus_id: str) -> str | None:
        return self.buses[self.bus_index[bus_id]].zone

    def replace(self, **changes) -> "NetworkModel":
        return dataclasses.replace(self, **changes)


class Layout:
    """Index arrays compiled once per model for the numerical kernels."""

    def __init__(self, model: NetworkModel):
        idx = model.bus_index
        self.n_bus = len(model.buses)
        self.base_mva = model.system_base_mva
        self.bus_ids = [b.id for b in model.buses]
        self.slack = np.array([i for i, b in enumerate(model.buses) if b.kind is BusKind.SLACK], dtype=int)
        self.v_min = np.array([b.v_min for b in model.buses])
        self.v_max = np.array([b.v_max for b in model.buses])
        self.v_target = np.array([np.nan if b.voltage_target is None else b.voltage_target for b in model.buses])
        self.is_low = np.array([b.voltage_class is VoltageClass.LOW for b in model.buses])

        br = model.branches
        self.br_f = np.array([idx[b.from_bus] for b in br], dtype=int)
        self.br_t = np.array([idx[b.to_bus] for b in br], dtype=int)
        self.br_ys = np.array([1.0 / complex(b.resistance, b.reactance) for b in br], dtype=complex)
        self.br_b = np.array([b.charging_susceptance for b in br])
        self.br_limit = np.array([b.thermal_limit for b in br])

        tr = model.transformers
        self.tr_f = np.array([idx[t.from_bus] for t in tr], dtype=int)
        self.tr_t = np.array([idx[t.to_bus] for t in tr], dtype=int)
        self.tr_ys = np.array([1.0 / complex(t.resistance, t.reactance) for t in tr], dtype=complex)
        self.tr_step = np.array([t.tap_step for t in tr])
        self.tr_limit = np.array([t.thermal_limit for t in tr])

        sh = model.shunts
        self.sh_bus = np.array([idx[s.bus] for s in sh], dtype=int)
        # per-unit susceptance per energized step at 1 pu voltage
        self.sh_b = np.array([s.sign * s.step_mvar / model.system_base_mva for s in sh])

        gens = model.generators
        self.gen_bus = np.array([idx[g.bus] for g in gens], dtype=int)
        self.gen_regulating = np.array([g.regulates_voltage for g in gens], dtype=bool)
        self.gen_qmin = np.array([g.q_min for g in gens])
        self.gen_qmax = np.array([g.q_max for g in gens])
        self.gen_is_slack = np.isin(self.gen_bus, self.slack) & self.gen_regulating

        self.load_bus = np.array([idx[ld.bus] for ld in model.loads], dtype=int)
        self.ess_bus = np.array([idx[e.bus] for e in model.ess], dtype=int)
        self.tie_bus = np.array([idx[t.bus] for t in model.interties], dtype=int)
        self.tie_sign = np.array([t.sign for t in model.interties])
        self.dr_bus = np.array([idx[d.bus] for d in model.demand_resources], dtype=int)

        self._ycache: OrderedDict[bytes, np.ndarray] = OrderedDict()

    def series_admittance(self, branch_status: np.ndarray, tap_positions: np.ndarray) -> np.ndarray:
        """Admittance matrix without switchable shunt banks (cached)."""
        key = np.asarray(branch_status, dtype=bool).tobytes() + np.asarray(tap_positions, dtype=np.int64).tobytes()
        cached = self._ycache.get(key)
        if cached is not None:
            self._ycache.move_to_end(key)
            return cached
        n = self.n_bus
        ybus = np.zeros((n, n), dtype=complex)
        on = np.asarray(branch_status, dtype=bool)
        f, t = self.br_f[on], self.br_t[on]
        ys, bc = self.br_ys[on], self.br_b[on]
        np.add.at(ybus, (f, f), ys + 0.5j * bc)
        np.add.at(ybus, (t, t), ys + 0.5j * bc)
        np.add.at(ybus, (f, t), -ys)
        np.add.at(ybus, (t, f), -ys)
        if len(self.tr_f):
            ratio = 1.0 + np.asarray(tap_positions) * self.tr_step
            ys = self.tr_ys
            np.add.at(ybus, (self.tr_f, self.tr_f), ys / ratio**2)
            np.add.at(ybus, (self.tr_t, self.tr_t), ys)
            np.add.at(ybus, (self.tr_f, self.tr_t), -ys / ratio)
            np.add.at(ybus, (self.tr_t, self.tr_f), -ys / ratio)
        ybus.setflags(write=False)
        self._ycache[key] = ybus
        if len(self._ycache) > 256:
            self._ycache.popitem(last=False)
        return ybus

    def shunt_susceptance(self, shunt_steps: np.ndarray) -> np.ndarray:
        b = np.zeros(self.n_bus)
        if len(self.sh_bus):
            np.add.at(b, self.sh_bus, self.sh_b * np.asarray(shunt_steps))
        return b

    def islands(self, branch_status: np.ndarray) -> tuple[int, np.ndarray]:
        on = np.asarray(branch_status, dtype=bool)
        f = np.concatenate([self.br_f[on], self.tr_f])
        t = np.concatenate([self.br_t[on], self.tr_t])
        graph = coo_matrix((np.ones(len(f)), (f, t)), shape=(self.n_bus, self.n_bus))
        return connected_components(graph, directed=False)


# -- validation ---------------------------------------------------------------

def validate(model: NetworkModel) -> ValidationReport:
    """Check references, limits and connectivity. Never raises."""
    report = ValidationReport()
    if model.system_base_mva <= 0:
        report.add("limit inversion", model.name, "system_base_mva must be positive")

    seen: dict[str, str] = {}
    groups = {
        "bus": model.buses, "branch": model.branches, "transformer": model.transformers,
        "shunt": model.shunts, "generator": model.generators, "load": model.loads,
        "ess": model.ess, "intertie": model.interties, "demand_resource": model.demand_resources,
    }
    for group, items in groups.items():
        for item in items:
            if item.id in seen:
                report.add("duplicate id", item.id, f"{group} id already used by a {seen[item.id]}")
            seen[item.id] = group

    bus_ids = {b.id for b in model.buses}

    def ref(element: str, bus: str | None) -> bool:
        if bus is None or bus in bus_ids:
            return True
        report.add("unresolved reference", element, f"bus '{bus}' is not defined")
        return False

    for b in model.buses:
        if b.base_kv <= 0:
            report.add("limit inversion", b.id, "base_kv must be positive")
        if b.v_min >= b.v_max:
            report.add("limit inversion", b.id, f"v_min {b.v_min} >= v_max {b.v_max}")
        if b.voltage_target is not None and not (b.v_min < b.voltage_target <= b.v_max):
            report.add("limit inversion", b.id, f"voltage target {b.voltage_target} outside ({b.v_min}, {b.v_max}]")
        if b.kind is not BusKind.PQ and b.voltage_target is None:
            report.add("missing setpoint", b.id, f"{b.kind.value} bus needs a voltage_target")
        if b.zone is not None and model.zones and b.zone not in model.zones:
            report.add("unresolved reference", b.id, f"zone '{b.zone}' is not declared")

    for br in model.branches:
        ok = ref(br.id, br.from_bus) & ref(br.id, br.to_bus)
        if ok and br.from_bus == br.to_bus:
            report.add("invalid branch", br.id, "from_bus equals to_bus")
        if br.reactance == 0:
            report.add("invalid branch", br.id, "reactance must be non-zero")
        if br.thermal_limit <= 0:
            report.add("limit inversion", br.id, "thermal_limit must be positive")
    for tr in model.transformers:
        ok = ref(tr.id, tr.from_bus) & ref(tr.id, tr.to_bus) & ref(tr.id, tr.regulated_bus)
        if ok and tr.from_bus == tr.to_bus:
            report.add("invalid branch", tr.id, "from_bus equals to_bus")
        if tr.reactance == 0:
            report.add("invalid branch", tr.id, "reactance must be non-zero")
        if tr.deadband <= 0:
            report.add("limit inversion", tr.id, "deadband must be positive")
        if tr.tap_step <= 0 or tr.tap_min > tr.tap_max:
            report.add("limit inversion", tr.id, "tap range or step invalid")
        elif not (tr.tap_min - 1e-12 <= tr.ratio() <= tr.tap_max + 1e-12):
            report.add("limit inversion", tr.id, f"tap ratio {tr.ratio():.5f} outside [{tr.tap_min}, {tr.tap_max}]")
    for sh in model.shunts:
        ref(sh.id, sh.bus)
        if not 0 <= sh.steps_on <= sh.steps_total:
            report.add("limit inversion", sh.id, f"steps_on {sh.steps_on} outside [0, {sh.steps_total}]")
        if sh.step_mvar <= 0:
            report.add("limit inversion", sh.id, "step_mvar must be positive")
    for g in model.generators:
        ref(g.id, g.bus)
        if not g.p_min <= g.optimal_dispatch <= g.p_max:
            report.add("limit inversion", g.id, "optimal_dispatch outside [p_min, p_max]")
        if g.q_min > g.q_max:
            report.add("limit inversion", g.id, "q_min > q_max")
        if g.ramp_up < 0 or g.ramp_down < 0:
            report.add("limit inversion", g.id, "ramp rates must be non-negative")
    for ld in model.loads:
        ref(ld.id, ld.bus)
    for e in model.ess:
        ref(e.id, e.bus)
        try:
            e.check()
        except ValueError as exc:
            report.add("limit inversion", e.id, str(exc))
    for tie in model.interties:
        ref(tie.id, tie.bus)
        if not tie.schedule_limit_min <= tie.current_schedule <= tie.schedule_limit_max:
            report.add("limit inversion", tie.id, "current_schedule outside schedule limits")
    for dr in model.demand_resources:
        ref(dr.id, dr.bus)
        if dr.capacity <= 0 or dr.activation_delay < 0 or dr.max_duration < 1:
            report.add("limit inversion", dr.id, "capacity, activation_delay or max_duration invalid")

    if report.ok:
        _check_islands(model, report)
    return report


def _check_islands(model: NetworkModel, report: ValidationReport) -> None:
    lay = model.layout
    status = np.array([b.in_service for b in model.branches], dtype=bool)
    n_comp, labels = lay.islands(status)
    slack = set(lay.slack.tolist())
    used = set(lay.load_bus.tolist()) | set(lay.gen_bus.tolist()) | set(lay.ess_bus.tolist()) | set(lay.tie_bus.tolist())
    for comp in range(n_comp):
        members = np.flatnonzero(labels == comp)
        names = [model.buses[i].id for i in members]
        n_slack = sum(1 for i in members if i in slack)
        if n_slack > 1:
            report.add("multiple slack", names[0], f"island {names} has {n_slack} slack buses")
        elif n_slack == 0:
            if any(i in set(lay.load_bus.tolist()) for i in members):
                report.add("load island without slack", names[0], f"island {names} carries load but has no slack bus")
            elif any(i in used for i in members):
                report.add("island without slack", names[0], f"island {names} has devices but no slack bus")
            else:
                report.add("isolated bus", names[0], f"island {names} is not connected to a slack bus")


# -- admittance ---------------------------------------------------------------

def build_admittance(model: NetworkModel, branch_status: Iterable[bool] | None = None,
                     tap_positions: Iterable[int] | None = None,
                     shunt_steps: Iterable[int] | None = None) -> np.ndarray:
    """Dense complex bus admittance matrix in per-unit.

    Defaults to the statuses stored in the model. Raises :class:`IslandError`
    when an energized island lacks a slack bus.
    """
    lay = model.layout
    status = np.array([b.in_service for b in model.branches] if branch_status is None else list(branch_status), dtype=bool)
    taps = np.array([t.tap_position for t in model.transformers] if tap_positions is None else list(tap_positions), dtype=int)
    steps = np.array([s.steps_on for s in model.shunts] if shunt_steps is None else list(shunt_steps), dtype=float)
    n_comp, labels = lay.islands(status)
    slack_labels = set(labels[lay.slack].tolist())
    for comp in range(n_comp):
        if comp not in slack_labels:
            raise IslandError([model.buses[i].id for i in np.flatnonzero(labels == comp)])
    ybus = lay.series_admittance(status, taps).copy()
    ybus[np.diag_indices(lay.n_bus)] += 1j * lay.shunt_susceptance(steps)
    return ybus


# -- per-unit -----------------------------------------------------------------

def to_per_unit(model: NetworkModel, value: float, quantity: str, at_bus: str | None = None) -> float:
    return value / _base(model, quantity, at_bus)


def from_per_unit(model: NetworkModel, value: float, quantity: str, at_bus: str | None = None) -> float:
    return value * _base(model, quantity, at_bus)


def _base(model: NetworkModel, quantity: str, at_bus: str | None) -> float:
    q = quantity.lower()
    if q in ("mw", "mvar", "mva"):
        base = model.system_base_mva
    elif q == "kv":
        if at_bus is None:
            raise ValueError("kV conversion needs a bus")
        base = model.buses[model.bus_index[at_bus]].base_kv
    else:
        raise ValueError(f"unknown quantity '{quantity}'")
    if base == 0:
        raise ZeroDivisionError(f"zero base for {quantity}")
    return base


# -- file format ----------------------------------------------------------------

_SECTIONS = {
    "buses": Bus, "branches": Branch, "transformers": Transformer, "shunts": ShuntBank,
    "generators": Generator, "loads": Load, "ess": EssUnit, "interties": Intertie,
    "demand_resources": DemandResource,
}


def _ohm_to_pu(model_base: float, kv: float, r: float, x: float, b_siemens: float) -> tuple[float, float, float]:
    zbase = kv * kv / model_base
    return r / zbase, x / zbase, b_siemens * zbase


def network_from_dict(doc: Mapping[str, Any]) -> NetworkModel:
    base = float(doc.get("system_base_mva", 100.0))
    sections: dict[str, list] = {}
    kv_of = {b["id"]: float(b["base_kv"]) for b in doc.get("buses", [])}
    for name, cls in _SECTIONS.items():
        fields = {f.name for f in dataclasses.fields(cls)}
        items = []
        for raw in doc.get(name, []) or []:
            raw = dict(raw)
            units = raw.pop("units", "pu")
            if name in ("branches", "transformers") and units == "ohm":
                kv = kv_of.get(raw["from_bus"], 1.0)
                r, x, b = _ohm_to_pu(base, kv, raw.get("resistance", 0.0), raw["reactance"],
                                     raw.get("charging_susceptance", 0.0))
                raw.update(resistance=r, reactance=x)
                if name == "branches":
                    raw["charging_susceptance"] = b
            unknown = set(raw) - fields
            if unknown:
                raise NetworkError(f"{name}: unknown field(s) {sorted(unknown)} in '{raw.get('id')}'")
            items.append(cls(**raw))
        sections[name] = tuple(items)
    return NetworkModel(name=doc.get("name", "network"), system_base_mva=base,
                        zones=tuple(doc.get("zones", ()) or ()), **sections)


def network_to_dict(model: NetworkModel) -> dict[str, Any]:
    def plain(obj):
        out = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if isinstance(v, enum.Enum):
                v = v.value
            out[f.name] = v
        return out

    doc: dict[str, Any] = {"name": model.name, "system_base_mva": model.system_base_mva, "zones": list(model.zones)}
    for name in _SECTIONS:
        doc[name] = [plain(x) for x in getattr(model, name)]
    return doc


def load_network(path: str | Path) -> NetworkModel:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    try:
        return network_from_dict(doc)
    except (TypeError, ValueError, KeyError) as exc:
        raise NetworkError(f"{path}: {exc}") from exc


def save_network(model: NetworkModel, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        yaml.safe_dump(network_to_dict(model), fh, sort_keys=False)
