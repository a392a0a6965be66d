"""Network-constrained UC as a generic sparse MILP, plus fixing and solution checking."""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .instance import BASE_MVA, DailySchedule, UcInstance
from .mask import FreezeMask

LOGGER = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-6

LE, EQ, GE = "<=", "=", ">="
BINARY_KINDS = ("U", "V", "W")

CAPACITY = "capacity (1b)"
LOGIC = "logic (1c)"
MIN_UP = "min up (1d)"
MIN_DOWN = "min down (1e)"
INITIAL_UP = "initial up"
INITIAL_DOWN = "initial down"
RAMP_UP = "ramp up (1f)"
RAMP_DOWN = "ramp down (1g)"
BALANCE = "balance (1h)"
FLOW = "flow (1i)"
LINE_LIMIT = "line limit (1j)"
REFERENCE = "reference angle"
INTEGRALITY = "integrality (1k)"


class FixingError(RuntimeError):
    """Raised when a mask addresses a commitment column that does not exist."""


@dataclass(frozen=True)
class VarKey:
    kind: str
    ident: str
    t: int


@dataclass(frozen=True)
class RowKey:
    family: str
    ident: str
    t: int
    tag: str = ""


@dataclass(frozen=True)
class Column:
    key: VarKey
    lower: float
    upper: float
    integer: bool
    cost: float


@dataclass(frozen=True, eq=False)
class MilpProblem:
    """Minimise ``cost @ x`` subject to ``matrix @ x (sense) rhs`` and column bounds."""

    keys: Tuple[VarKey, ...]
    lower: np.ndarray
    upper: np.ndarray
    cost: np.ndarray
    integer: np.ndarray
    matrix: sp.csr_matrix
    senses: Tuple[str, ...]
    rhs: np.ndarray
    row_keys: Tuple[RowKey, ...]
    initial_commitment: Mapping[str, int] = field(default_factory=dict)
    index: Dict[VarKey, int] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        for name in ("lower", "upper", "cost", "rhs"):
            array = np.array(getattr(self, name), dtype=float)
            array.setflags(write=False)
            object.__setattr__(self, name, array)
        integer = np.array(self.integer, dtype=bool)
        integer.setflags(write=False)
        object.__setattr__(self, "integer", integer)
        if not self.index:
            object.__setattr__(self, "index", {key: i for i, key in enumerate(self.keys)})

    @property
    def num_columns(self) -> int:
        return len(self.keys)

    @property
    def num_rows(self) -> int:
        return len(self.senses)

    @property
    def columns(self) -> List[Column]:
        return [
            Column(key, float(self.lower[i]), float(self.upper[i]), bool(self.integer[i]), float(self.cost[i]))
            for i, key in enumerate(self.keys)
        ]

    @property
    def rows(self) -> List[Tuple[List[Tuple[int, float]], str, float]]:
        out = []
        for r in range(self.num_rows):
            start, end = self.matrix.indptr[r], self.matrix.indptr[r + 1]
            coeffs = list(zip(self.matrix.indices[start:end].tolist(), self.matrix.data[start:end].tolist()))
            out.append((coeffs, self.senses[r], float(self.rhs[r])))
        return out

    def column(self, key: VarKey) -> int:
        return self.index[key]

    def columns_of_kind(self, *kinds: str) -> np.ndarray:
        return np.array([i for i, key in enumerate(self.keys) if key.kind in kinds], dtype=int)

    def with_bounds(self, lower: np.ndarray, upper: np.ndarray) -> "MilpProblem":
        return replace(self, lower=lower, upper=upper, index=self.index)

    def objective_value(self, values: np.ndarray) -> float:
        return float(self.cost @ np.asarray(values, dtype=float))

    def assignment(self, values: Sequence[float]) -> Dict[VarKey, float]:
        return {key: float(value) for key, value in zip(self.keys, values)}


class _Builder:
    def __init__(self) -> None:
        self.keys: List[VarKey] = []
        self.lower: List[float] = []
        self.upper: List[float] = []
        self.cost: List[float] = []
        self.integer: List[bool] = []
        self.index: Dict[VarKey, int] = {}
        self.row_ptr: List[int] = []
        self.col_idx: List[int] = []
        self.values: List[float] = []
        self.senses: List[str] = []
        self.rhs: List[float] = []
        self.row_keys: List[RowKey] = []

    def add_column(self, key: VarKey, lower: float, upper: float, integer: bool, cost: float) -> int:
        self.index[key] = len(self.keys)
        self.keys.append(key)
        self.lower.append(lower)
        self.upper.append(upper)
        self.integer.append(integer)
        self.cost.append(cost)
        return self.index[key]

    def add_row(self, key: RowKey, terms: Sequence[Tuple[VarKey, float]], sense: str, rhs: float) -> None:
        merged: Dict[int, float] = {}
        for var, coeff in terms:
            if coeff != 0.0:
                col = self.index[var]
                merged[col] = merged.get(col, 0.0) + coeff
        row = len(self.senses)
        for col in sorted(merged):
            self.row_ptr.append(row)
            self.col_idx.append(col)
            self.values.append(merged[col])
        self.senses.append(sense)
        self.rhs.append(float(rhs))
        self.row_keys.append(key)

    def build(self, initial_commitment: Mapping[str, int]) -> MilpProblem:
        matrix = sp.csr_matrix(
            (self.values, (self.row_ptr, self.col_idx)), shape=(len(self.senses), len(self.keys))
        )
        matrix.sort_indices()
        return MilpProblem(
            keys=tuple(self.keys),
            lower=np.array(self.lower),
            upper=np.array(self.upper),
            cost=np.array(self.cost),
            integer=np.array(self.integer),
            matrix=matrix,
            senses=tuple(self.senses),
            rhs=np.array(self.rhs),
            row_keys=tuple(self.row_keys),
            initial_commitment=dict(initial_commitment),
            index=dict(self.index),
        )


def theta_bound(inst: UcInstance) -> float:
    return 2.0 * math.pi * len(inst.buses)


def build_uc_milp(inst: UcInstance) -> MilpProblem:
    """Emit the UC MILP: objective (1a), constraints (1b)-(1k) and horizon-boundary forcing."""

    T = inst.horizon
    b = _Builder()
    U = lambda g, t: VarKey("U", g, t)  # noqa: E731
    V = lambda g, t: VarKey("V", g, t)  # noqa: E731
    W = lambda g, t: VarKey("W", g, t)  # noqa: E731
    P = lambda g, t: VarKey("P", g, t)  # noqa: E731

    for gen in inst.generators:
        for t in range(1, T + 1):
            b.add_column(U(gen.id, t), 0.0, 1.0, True, gen.c_nl)
            b.add_column(V(gen.id, t), 0.0, 1.0, True, gen.c_su)
            b.add_column(W(gen.id, t), 0.0, 1.0, True, 0.0)
            b.add_column(P(gen.id, t), 0.0, gen.p_max, False, gen.c)
    for line in inst.lines:
        for t in range(1, T + 1):
            b.add_column(VarKey("F", line.id, t), -line.f_max, line.f_max, False, 0.0)
    bound = theta_bound(inst)
    for bus in inst.buses:
        for t in range(1, T + 1):
            if bus == inst.ref_bus:
                b.add_column(VarKey("THETA", bus, t), 0.0, 0.0, False, 0.0)
            else:
                b.add_column(VarKey("THETA", bus, t), -bound, bound, False, 0.0)

    for gen in inst.generators:
        g = gen.id
        for t in range(1, T + 1):
            b.add_row(RowKey(CAPACITY, g, t, "min"), [(P(g, t), 1.0), (U(g, t), -gen.p_min)], GE, 0.0)
        for t in range(1, T + 1):
            b.add_row(RowKey(CAPACITY, g, t, "max"), [(P(g, t), 1.0), (U(g, t), -gen.p_max)], LE, 0.0)
        for t in range(1, T + 1):
            terms = [(U(g, t), 1.0), (V(g, t), -1.0), (W(g, t), 1.0)]
            if t == 1:
                b.add_row(RowKey(LOGIC, g, t), terms, EQ, float(gen.u0))
            else:
                b.add_row(RowKey(LOGIC, g, t), terms + [(U(g, t - 1), -1.0)], EQ, 0.0)
        for t in range(1, T + 1):
            window = range(max(1, t - gen.ut + 1), t + 1)
            b.add_row(RowKey(MIN_UP, g, t), [(V(g, s), 1.0) for s in window] + [(U(g, t), -1.0)], LE, 0.0)
        for t in range(1, T + 1):
            window = range(max(1, t - gen.dt + 1), t + 1)
            b.add_row(RowKey(MIN_DOWN, g, t), [(W(g, s), 1.0) for s in window] + [(U(g, t), 1.0)], LE, 1.0)
        if gen.u0 == 1:
            for t in range(1, min(T, max(0, gen.ut - gen.init_duration)) + 1):
                b.add_row(RowKey(INITIAL_UP, g, t), [(U(g, t), 1.0)], EQ, 1.0)
        else:
            for t in range(1, min(T, max(0, gen.dt - gen.init_duration)) + 1):
                b.add_row(RowKey(INITIAL_DOWN, g, t), [(U(g, t), 1.0)], EQ, 0.0)
        for t in range(1, T + 1):
            if t == 1:
                b.add_row(
                    RowKey(RAMP_UP, g, t),
                    [(P(g, t), 1.0), (V(g, t), -gen.r_su)],
                    LE,
                    gen.p0 + gen.r_hr * gen.u0,
                )
            else:
                b.add_row(
                    RowKey(RAMP_UP, g, t),
                    [(P(g, t), 1.0), (P(g, t - 1), -1.0), (U(g, t - 1), -gen.r_hr), (V(g, t), -gen.r_su)],
                    LE,
                    0.0,
                )
        for t in range(1, T + 1):
            if t == 1:
                b.add_row(
                    RowKey(RAMP_DOWN, g, t),
                    [(P(g, t), -1.0), (U(g, t), -gen.r_hr), (W(g, t), -gen.r_sd)],
                    LE,
                    -gen.p0,
                )
            else:
                b.add_row(
                    RowKey(RAMP_DOWN, g, t),
                    [(P(g, t - 1), 1.0), (P(g, t), -1.0), (U(g, t), -gen.r_hr), (W(g, t), -gen.r_sd)],
                    LE,
                    0.0,
                )

    for n, bus in enumerate(inst.buses):
        units = [gen.id for gen in inst.generators if gen.bus == bus]
        for t in range(1, T + 1):
            terms = [(P(g, t), 1.0) for g in units]
            for line in inst.lines:
                if line.from_bus == bus:
                    terms.append((VarKey("F", line.id, t), -1.0))
                elif line.to_bus == bus:
                    terms.append((VarKey("F", line.id, t), 1.0))
            b.add_row(RowKey(BALANCE, bus, t), terms, EQ, float(inst.demand[n, t - 1]))

    for line in inst.lines:
        scale = BASE_MVA * line.b
        for t in range(1, T + 1):
            b.add_row(
                RowKey(FLOW, line.id, t),
                [
                    (VarKey("F", line.id, t), 1.0),
                    (VarKey("THETA", line.from_bus, t), -scale),
                    (VarKey("THETA", line.to_bus, t), scale),
                ],
                EQ,
                0.0,
            )

    prob = b.build({gen.id: gen.u0 for gen in inst.generators})
    LOGGER.debug("Built UC MILP with %s columns and %s rows", prob.num_columns, prob.num_rows)
    return prob


def fix_commitments(prob: MilpProblem, mask: FreezeMask) -> MilpProblem:
    """Return a copy with ``lower = upper = u`` on every masked commitment column."""

    if not mask.entries:
        return prob
    lower = prob.lower.copy()
    upper = prob.upper.copy()
    for entry in mask.entries:
        col = prob.index.get(VarKey("U", entry.g, entry.t))
        if col is None:
            raise FixingError(f"mask tuple [{entry.t}, {entry.g!r}, {entry.u}] addresses no commitment column")
        lower[col] = upper[col] = float(entry.u)
    return prob.with_bounds(lower, upper)


def unfix_all(prob: MilpProblem) -> MilpProblem:
    """Restore every commitment column to bounds [0, 1]."""

    cols = prob.columns_of_kind("U")
    if cols.size == 0 or (np.all(prob.lower[cols] == 0.0) and np.all(prob.upper[cols] == 1.0)):
        return prob
    lower = prob.lower.copy()
    upper = prob.upper.copy()
    lower[cols] = 0.0
    upper[cols] = 1.0
    return prob.with_bounds(lower, upper)


def problem_counts(prob: MilpProblem) -> Tuple[int, int, int]:
    binaries = int(np.count_nonzero(prob.integer))
    return binaries, prob.num_columns - binaries, prob.num_rows


@dataclass(frozen=True)
class ConstraintViolation:
    family: str
    ident: str
    t: int
    residual: float

    def __str__(self) -> str:
        return f"{self.family} at ({self.ident}, t={self.t}): residual {self.residual:.6g}"


@dataclass(frozen=True)
class ConstraintReport:
    violations: Tuple[ConstraintViolation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    @property
    def max_residual(self) -> float:
        return max((v.residual for v in self.violations), default=0.0)

    def families(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for violation in self.violations:
            counts[violation.family] = counts.get(violation.family, 0) + 1
        return counts

    def summary(self, limit: int = 10) -> str:
        if self.ok:
            return "no violations"
        lines = [f"{len(self.violations)} binding/violated constraints:"]
        worst = sorted(self.violations, key=lambda v: -v.residual)[:limit]
        lines.extend(f"- {violation}" for violation in worst)
        return "\n".join(lines)


def evaluate_solution(inst: UcInstance, assignment: Mapping[VarKey, float], tol: float = FEASIBILITY_TOL) -> ConstraintReport:
    """Check a full assignment against every constraint family of the formulation."""

    found: List[ConstraintViolation] = []
    T = inst.horizon

    def val(kind: str, ident: str, t: int) -> float:
        return float(assignment[VarKey(kind, ident, t)])

    def report(family: str, ident: str, t: int, residual: float) -> None:
        if residual > tol:
            found.append(ConstraintViolation(family, ident, t, float(residual)))

    for gen in inst.generators:
        g = gen.id
        u = [float(gen.u0)] + [val("U", g, t) for t in range(1, T + 1)]
        v = [0.0] + [val("V", g, t) for t in range(1, T + 1)]
        w = [0.0] + [val("W", g, t) for t in range(1, T + 1)]
        p = [float(gen.p0)] + [val("P", g, t) for t in range(1, T + 1)]
        for t in range(1, T + 1):
            for x in (u[t], v[t], w[t]):
                report(INTEGRALITY, g, t, min(abs(x), abs(x - 1.0)))
            report(CAPACITY, g, t, max(0.0, gen.p_min * u[t] - p[t], p[t] - gen.p_max * u[t]))
            report(LOGIC, g, t, abs(u[t] - u[t - 1] - v[t] + w[t]))
            up_window = range(max(1, t - gen.ut + 1), t + 1)
            report(MIN_UP, g, t, max(0.0, sum(v[s] for s in up_window) - u[t]))
            down_window = range(max(1, t - gen.dt + 1), t + 1)
            report(MIN_DOWN, g, t, max(0.0, sum(w[s] for s in down_window) + u[t] - 1.0))
            if gen.u0 == 1 and t <= gen.ut - gen.init_duration:
                report(INITIAL_UP, g, t, abs(u[t] - 1.0))
            if gen.u0 == 0 and t <= gen.dt - gen.init_duration:
                report(INITIAL_DOWN, g, t, abs(u[t]))
            report(RAMP_UP, g, t, max(0.0, p[t] - p[t - 1] - gen.r_hr * u[t - 1] - gen.r_su * v[t]))
            report(RAMP_DOWN, g, t, max(0.0, p[t - 1] - p[t] - gen.r_hr * u[t] - gen.r_sd * w[t]))

    for t in range(1, T + 1):
        flows = {line.id: val("F", line.id, t) for line in inst.lines}
        theta = {bus: val("THETA", bus, t) for bus in inst.buses}
        report(REFERENCE, inst.ref_bus, t, abs(theta[inst.ref_bus]))
        for n, bus in enumerate(inst.buses):
            injection = sum(val("P", gen.id, t) for gen in inst.generators if gen.bus == bus)
            net = 0.0
            for line in inst.lines:
                if line.from_bus == bus:
                    net += flows[line.id]
                elif line.to_bus == bus:
                    net -= flows[line.id]
            report(BALANCE, bus, t, abs(injection - float(inst.demand[n, t - 1]) - net))
        for line in inst.lines:
            expected = BASE_MVA * line.b * (theta[line.from_bus] - theta[line.to_bus])
            report(FLOW, line.id, t, abs(flows[line.id] - expected))
            report(LINE_LIMIT, line.id, t, max(0.0, abs(flows[line.id]) - line.f_max))

    return ConstraintReport(tuple(found))


def schedule_from_solution(inst: UcInstance, prob: MilpProblem, values: Sequence[float]) -> DailySchedule:
    values = np.asarray(values, dtype=float)
    G, T = len(inst.generators), inst.horizon
    u = np.zeros((G, T), dtype=np.int8)
    p = np.zeros((G, T))
    for i, gen in enumerate(inst.generators):
        for t in range(1, T + 1):
            u[i, t - 1] = int(round(values[prob.index[VarKey("U", gen.id, t)]]))
            p[i, t - 1] = values[prob.index[VarKey("P", gen.id, t)]] if u[i, t - 1] else 0.0
    return DailySchedule(u=u, p=np.maximum(p, 0.0))


_LP_NAME = re.compile(r"[^A-Za-z0-9_.]")


def _lp_name(key: VarKey) -> str:
    return _LP_NAME.sub("_", f"{key.kind}_{key.ident}_{key.t}")


def _lp_terms(pairs: Sequence[Tuple[int, float]], names: Sequence[str]) -> str:
    parts = []
    for col, coeff in pairs:
        sign = "-" if coeff < 0 else "+"
        parts.append(f"{sign} {abs(coeff):.12g} {names[col]}")
    text = " ".join(parts) if parts else "0"
    return text[2:] if text.startswith("+ ") else text


def write_lp(prob: MilpProblem, name: Optional[str] = None) -> str:
    """Render the problem in CPLEX LP text format for cross-checking with external solvers."""

    names = [_lp_name(key) for key in prob.keys]
    out = [f"\\ {name or 'ucmask problem'}", "Minimize", " obj: " + _lp_terms(
        [(i, c) for i, c in enumerate(prob.cost.tolist()) if c != 0.0], names
    ), "Subject To"]
    for r, (coeffs, sense, rhs) in enumerate(prob.rows):
        out.append(f" c{r}: {_lp_terms(coeffs, names)} {sense} {rhs:.12g}")
    out.append("Bounds")
    for i, key in enumerate(prob.keys):
        lo, hi = prob.lower[i], prob.upper[i]
        if lo == hi:
            out.append(f" {names[i]} = {lo:.12g}")
        else:
            out.append(f" {lo:.12g} <= {names[i]} <= {hi:.12g}")
    binaries = [names[i] for i in np.flatnonzero(prob.integer)]
    if binaries:
        out.append("Binaries")
        out.extend(f" {name}" for name in binaries)
    out.append("End")
    return "\n".join(out) + "\n"
