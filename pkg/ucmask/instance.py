"""Unit-commitment problem data: ingestion, validation, perturbation and similarity."""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import ValidationError

from .schemas import HISTORY_ADAPTER, InstanceDoc

LOGGER = logging.getLogger(__name__)

# Susceptances are per-unit on this base; line flow in MW is BASE_MVA * b * angle difference.
BASE_MVA = 100.0
TOLERANCE = 1e-9


class InstanceError(RuntimeError):
    """Base class for instance ingestion problems."""

    def __init__(self, message: str, *, field: str = "", location: str = "") -> None:
        super().__init__(message)
        self.field = field
        self.location = location


class InstanceSyntaxError(InstanceError):
    """Raised when the document is not well-formed."""


class InstanceSemanticError(InstanceError):
    """Raised when a well-formed document violates an instance invariant."""


class HistoryError(InstanceError):
    """Raised when a history bank does not match its target instance."""


@dataclass(frozen=True)
class Generator:
    id: str
    bus: str
    c: float
    c_nl: float
    c_su: float
    p_min: float
    p_max: float
    ut: int
    dt: int
    r_hr: float
    r_su: float
    r_sd: float
    u0: int
    p0: float
    init_duration: int


@dataclass(frozen=True)
class Line:
    id: str
    from_bus: str
    to_bus: str
    b: float
    f_max: float


def _frozen_array(values, dtype=float) -> np.ndarray:
    array = np.array(values, dtype=dtype, copy=True)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class UcInstance:
    buses: Tuple[str, ...]
    ref_bus: str
    generators: Tuple[Generator, ...]
    lines: Tuple[Line, ...]
    horizon: int
    demand: np.ndarray
    name: str = "instance"

    def __post_init__(self) -> None:
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "generators", tuple(self.generators))
        object.__setattr__(self, "lines", tuple(self.lines))
        object.__setattr__(self, "demand", _frozen_array(self.demand))

    @property
    def generator_ids(self) -> Tuple[str, ...]:
        return tuple(gen.id for gen in self.generators)

    def generator_index(self, gen_id: str) -> int:
        for index, gen in enumerate(self.generators):
            if gen.id == gen_id:
                return index
        raise KeyError(gen_id)

    def bus_index(self, bus_id: str) -> int:
        return self.buses.index(bus_id)

    def total_demand(self) -> np.ndarray:
        """Hourly total system load, the profile used for similarity matching."""

        return self.demand.sum(axis=0)

    def with_demand(self, demand: np.ndarray) -> "UcInstance":
        demand = np.asarray(demand, dtype=float)
        if demand.shape != self.demand.shape:
            raise InstanceSemanticError(
                f"demand shape {demand.shape} does not match {self.demand.shape}",
                field="demand",
            )
        return replace(self, demand=demand)

    def with_initial_state(self, states: Mapping[str, Tuple[int, float, int]]) -> "UcInstance":
        """Return a copy whose generators start from ``{id: (u0, p0, init_duration)}``."""

        generators = []
        for gen in self.generators:
            if gen.id in states:
                u0, p0, duration = states[gen.id]
                gen = replace(gen, u0=int(u0), p0=float(p0), init_duration=int(duration))
            generators.append(gen)
        return replace(self, generators=tuple(generators))

    def with_generators(self, generators: Sequence[Generator]) -> "UcInstance":
        return replace(self, generators=tuple(generators))

    def same_as(self, other: "UcInstance") -> bool:
        return (
            self.buses == other.buses
            and self.ref_bus == other.ref_bus
            and self.generators == other.generators
            and self.lines == other.lines
            and self.horizon == other.horizon
            and self.demand.shape == other.demand.shape
            and bool(np.array_equal(self.demand, other.demand))
        )


class ScheduleError(InstanceError):
    """Raised when a commitment schedule breaks its invariants."""


@dataclass(frozen=True, eq=False)
class DailySchedule:
    u: np.ndarray
    p: np.ndarray

    def __post_init__(self) -> None:
        u = np.asarray(self.u)
        p = np.asarray(self.p, dtype=float)
        if u.ndim != 2 or u.shape != p.shape:
            raise ScheduleError(f"schedule u{u.shape} and p{p.shape} must share a 2-D shape")
        if not np.all((u == 0) | (u == 1)):
            raise ScheduleError("schedule u must be binary")
        if np.any(p < -1e-6):
            raise ScheduleError("schedule p must be nonnegative")
        if np.any((u == 0) & (np.abs(p) > 1e-6)):
            raise ScheduleError("schedule p must be zero while a unit is off")
        object.__setattr__(self, "u", _frozen_array(u, dtype=np.int8))
        object.__setattr__(self, "p", _frozen_array(np.where(u == 1, np.maximum(p, 0.0), 0.0)))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.u.shape  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class HistoryDay:
    profile: np.ndarray
    schedule: DailySchedule

    def __post_init__(self) -> None:
        object.__setattr__(self, "profile", _frozen_array(self.profile))


@dataclass(frozen=True)
class HistoryBank:
    days: Tuple[HistoryDay, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        days = tuple(self.days)
        object.__setattr__(self, "days", days)
        if days:
            shape = days[0].schedule.shape
            for index, day in enumerate(days):
                if day.schedule.shape != shape or day.profile.shape != (shape[1],):
                    raise HistoryError(
                        f"history day {index} has shape {day.schedule.shape}, expected {shape}",
                        location=f"day[{index}]",
                    )

    def __len__(self) -> int:
        return len(self.days)

    @property
    def shape(self) -> Optional[Tuple[int, int]]:
        return self.days[0].schedule.shape if self.days else None

    def profiles(self) -> np.ndarray:
        return np.vstack([day.profile for day in self.days]) if self.days else np.zeros((0, 0))

    def appended(self, day: HistoryDay) -> "HistoryBank":
        return HistoryBank(self.days + (day,))

    def check_against(self, inst: UcInstance) -> None:
        expected = (len(inst.generators), inst.horizon)
        if self.days and self.shape != expected:
            raise HistoryError(f"history shape {self.shape} does not match instance shape {expected}")


@dataclass(frozen=True)
class Violation:
    field: str
    location: str
    detail: str
    kind: str = "invariant"

    def __str__(self) -> str:
        return f"{self.field} at {self.location}: {self.detail}"


def _reject_constant(token: str):
    raise InstanceSyntaxError(f"non-finite number {token} is not permitted", field=token)


def _loc(error_loc: Iterable) -> str:
    return ".".join(str(part) for part in error_loc)


def parse_instance(text: str, *, name: str = "instance") -> UcInstance:
    """Parse an instance document, raising on syntax or invariant violations."""

    try:
        raw = json.loads(text, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise InstanceSyntaxError(
            f"malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}",
            location=f"line {exc.lineno} column {exc.colno}",
        ) from exc
    try:
        doc = InstanceDoc.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = _loc(first.get("loc", ()))
        raise InstanceSyntaxError(
            f"invalid field {where}: {first.get('msg')}", field=where, location=where
        ) from exc

    unknown = sorted(set(doc.demand) - set(doc.buses))
    if unknown:
        raise InstanceSemanticError(
            f"demand references unknown bus {unknown[0]!r}", field="demand", location=unknown[0]
        )
    missing = [bus for bus in doc.buses if bus not in doc.demand]
    if missing:
        raise InstanceSemanticError(
            f"demand missing for bus {missing[0]!r}", field="demand", location=missing[0]
        )
    for bus in doc.buses:
        if len(doc.demand[bus]) != doc.horizon:
            raise InstanceSemanticError(
                f"demand for bus {bus!r} has {len(doc.demand[bus])} entries, expected {doc.horizon}",
                field="demand",
                location=bus,
            )

    demand = np.array([doc.demand[bus] for bus in doc.buses], dtype=float).reshape(len(doc.buses), doc.horizon)
    inst = UcInstance(
        buses=tuple(doc.buses),
        ref_bus=doc.ref_bus,
        generators=tuple(Generator(**gen.model_dump()) for gen in doc.generators),
        lines=tuple(Line(**line.model_dump()) for line in doc.lines),
        horizon=doc.horizon,
        demand=demand,
        name=name,
    )
    for violation in validate_instance(inst):
        if violation.kind == "invariant":
            raise InstanceSemanticError(str(violation), field=violation.field, location=violation.location)
    return inst


def load_instance(path: Path) -> UcInstance:
    return parse_instance(Path(path).read_text(encoding="utf-8"), name=Path(path).stem)


def serialize_instance(inst: UcInstance) -> str:
    payload = {
        "buses": list(inst.buses),
        "ref_bus": inst.ref_bus,
        "generators": [asdict(gen) for gen in inst.generators],
        "lines": [asdict(line) for line in inst.lines],
        "horizon": inst.horizon,
        "demand": {bus: [float(v) for v in inst.demand[i]] for i, bus in enumerate(inst.buses)},
    }
    return json.dumps(payload, indent=2, sort_keys=True)


def _connected(inst: UcInstance) -> bool:
    if len(inst.buses) <= 1:
        return True
    neighbours: Dict[str, List[str]] = {bus: [] for bus in inst.buses}
    for line in inst.lines:
        if line.from_bus in neighbours and line.to_bus in neighbours:
            neighbours[line.from_bus].append(line.to_bus)
            neighbours[line.to_bus].append(line.from_bus)
    seen = {inst.buses[0]}
    queue = deque([inst.buses[0]])
    while queue:
        for nxt in neighbours[queue.popleft()]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return len(seen) == len(inst.buses)


def _generator_violations(gen: Generator, buses: set, where: str) -> List[Violation]:
    found: List[Violation] = []

    def bad(field_name: str, detail: str) -> None:
        found.append(Violation(f"generators.{field_name}", where, detail))

    if gen.bus not in buses:
        bad("bus", f"unknown bus {gen.bus!r}")
    numbers = (gen.c, gen.c_nl, gen.c_su, gen.p_min, gen.p_max, gen.r_hr, gen.r_su, gen.r_sd, gen.p0)
    if not all(math.isfinite(value) for value in numbers):
        bad("c", "all numeric fields must be finite")
        return found
    if gen.p_min < 0:
        bad("p_min", f"p_min {gen.p_min} is negative")
    if gen.p_min > gen.p_max:
        bad("p_min", f"p_min {gen.p_min} exceeds p_max {gen.p_max}")
    for name in ("ut", "dt", "init_duration"):
        if getattr(gen, name) < 1:
            bad(name, f"{name} must be an integer >= 1")
    for name in ("r_hr", "r_su", "r_sd"):
        if getattr(gen, name) < 0:
            bad(name, f"{name} must be nonnegative")
    if gen.r_su < gen.p_min:
        bad("r_su", f"startup ramp {gen.r_su} is below p_min {gen.p_min}")
    if gen.r_sd < gen.p_min:
        bad("r_sd", f"shutdown ramp {gen.r_sd} is below p_min {gen.p_min}")
    if gen.u0 not in (0, 1):
        bad("u0", f"initial status {gen.u0} is not 0 or 1")
    elif gen.u0 == 1 and not (gen.p_min - TOLERANCE <= gen.p0 <= gen.p_max + TOLERANCE):
        bad("p0", f"initial output {gen.p0} outside [{gen.p_min}, {gen.p_max}] for a committed unit")
    elif gen.u0 == 0 and gen.p0 != 0:
        bad("p0", f"initial output {gen.p0} must be 0 for an offline unit")
    return found


def validate_instance(inst: UcInstance) -> List[Violation]:
    """Return every invariant violation plus the necessary capacity condition."""

    violations: List[Violation] = []
    buses = set(inst.buses)
    if not inst.buses:
        violations.append(Violation("buses", "buses", "at least one bus is required"))
    if len(buses) != len(inst.buses):
        violations.append(Violation("buses", "buses", "bus ids must be unique"))
    if inst.ref_bus not in buses:
        violations.append(Violation("ref_bus", "ref_bus", f"unknown bus {inst.ref_bus!r}"))
    if inst.horizon < 1:
        violations.append(Violation("horizon", "horizon", "horizon must be an integer >= 1"))

    seen_gens: set = set()
    for index, gen in enumerate(inst.generators):
        where = f"generators[{index}] ({gen.id})"
        if gen.id in seen_gens:
            violations.append(Violation("generators.id", where, f"duplicate generator id {gen.id!r}"))
        seen_gens.add(gen.id)
        violations.extend(_generator_violations(gen, buses, where))

    seen_lines: set = set()
    for index, line in enumerate(inst.lines):
        where = f"lines[{index}] ({line.id})"
        if line.id in seen_lines:
            violations.append(Violation("lines.id", where, f"duplicate line id {line.id!r}"))
        seen_lines.add(line.id)
        for end in ("from_bus", "to_bus"):
            if getattr(line, end) not in buses:
                violations.append(Violation(f"lines.{end}", where, f"unknown bus {getattr(line, end)!r}"))
        if line.from_bus == line.to_bus:
            violations.append(Violation("lines.to_bus", where, "line endpoints must differ"))
        if not (math.isfinite(line.b) and line.b > 0):
            violations.append(Violation("lines.b", where, f"susceptance {line.b} must be positive"))
        if not (math.isfinite(line.f_max) and line.f_max > 0):
            violations.append(Violation("lines.f_max", where, f"thermal limit {line.f_max} must be positive"))

    demand = inst.demand
    if demand.shape != (len(inst.buses), inst.horizon):
        violations.append(
            Violation("demand", "demand", f"shape {demand.shape} != {(len(inst.buses), inst.horizon)}")
        )
    elif not np.all(np.isfinite(demand)) or np.any(demand < 0):
        bus_i, hour_i = np.argwhere(~np.isfinite(demand) | (demand < 0))[0]
        violations.append(
            Violation("demand", f"{inst.buses[bus_i]}[{hour_i + 1}]", "demand must be finite and >= 0")
        )

    if not violations and not _connected(inst):
        violations.append(Violation("lines", "network", "bus graph is not connected"))

    if not violations:
        capacity = sum(gen.p_max for gen in inst.generators)
        peak = float(demand.sum(axis=0).max()) if inst.horizon else 0.0
        if capacity + TOLERANCE < peak:
            violations.append(
                Violation(
                    "generators.p_max",
                    "system",
                    f"total capacity {capacity:g} MW below peak demand {peak:g} MW",
                    kind="capacity",
                )
            )
    return violations


def perturb_demand(inst: UcInstance, sigma_rel: float, seed: int) -> UcInstance:
    """Scale every nodal hourly demand by ``max(0, 1 + sigma_rel * N(0, 1))``."""

    if sigma_rel < 0:
        raise ValueError(f"sigma_rel must be nonnegative, got {sigma_rel}")
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(inst.demand.shape)
    factor = np.maximum(0.0, 1.0 + sigma_rel * noise)
    return inst.with_demand(inst.demand * factor)


def load_distance(a: Sequence[float], b: Sequence[float]) -> float:
    """Euclidean distance between two total-load profiles."""

    left = np.asarray(a, dtype=float)
    right = np.asarray(b, dtype=float)
    if left.shape != right.shape:
        raise ValueError(f"profile lengths differ: {left.shape} vs {right.shape}")
    return float(np.linalg.norm(left - right))


def augment_instance(inst: UcInstance, extra_units: int, seed: int) -> UcInstance:
    """Clone existing units (round-robin) with jittered costs to enlarge the commitment space."""

    if extra_units <= 0 or not inst.generators:
        return inst
    rng = np.random.default_rng(seed)
    clones: List[Generator] = []
    for k in range(extra_units):
        base = inst.generators[k % len(inst.generators)]
        jitter = 1.0 + 0.05 * rng.uniform(-1.0, 1.0, size=3)
        clones.append(
            replace(
                base,
                id=f"{base.id}_x{k + 1}",
                c=float(base.c * jitter[0]),
                c_nl=float(base.c_nl * jitter[1]),
                c_su=float(base.c_su * jitter[2]),
            )
        )
    augmented = inst.with_generators(inst.generators + tuple(clones))
    return replace(augmented, name=f"{inst.name}+{extra_units}")


def parse_history(text: str, inst: UcInstance) -> HistoryBank:
    try:
        docs = HISTORY_ADAPTER.validate_json(text)
    except ValidationError as exc:
        first = exc.errors()[0]
        raise HistoryError(
            f"invalid history document at {_loc(first.get('loc', ()))}: {first.get('msg')}",
            location=_loc(first.get("loc", ())),
        ) from exc
    days = []
    for index, doc in enumerate(docs):
        try:
            schedule = DailySchedule(u=np.array(doc.schedule.u), p=np.array(doc.schedule.p, dtype=float))
        except ScheduleError as exc:
            raise HistoryError(f"history day {index}: {exc}", location=f"[{index}]") from exc
        days.append(HistoryDay(profile=np.array(doc.demand, dtype=float), schedule=schedule))
    bank = HistoryBank(tuple(days))
    bank.check_against(inst)
    return bank


def load_history(path: Path, inst: UcInstance) -> HistoryBank:
    bank = parse_history(Path(path).read_text(encoding="utf-8"), inst)
    LOGGER.info("Loaded %s history days from %s", len(bank), path)
    return bank


def serialize_history(bank: HistoryBank) -> str:
    payload = [
        {
            "demand": [float(v) for v in day.profile],
            "schedule": {
                "u": day.schedule.u.astype(int).tolist(),
                "p": [[float(v) for v in row] for row in day.schedule.p],
            },
        }
        for day in bank.days
    ]
    return json.dumps(payload)
