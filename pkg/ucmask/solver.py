"""Branch-and-bound MILP engine with node, iteration and timing instrumentation."""
from __future__ import annotations

import heapq
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .formulation import MilpProblem, VarKey, fix_commitments
from .mask import FreezeMask
from .simplex import INFEASIBLE, OPTIMAL, UNBOUNDED, Basis, LpResult, SimplexError, solve_lp

LOGGER = logging.getLogger(__name__)

INT_TOL = 1e-6
PRUNE_TOL = 1e-9

STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_GAP_LIMIT = "gap_limit"
STATUS_TIME_LIMIT = "time_limit"
STATUS_NODE_LIMIT = "node_limit"
LIMIT_STATUSES = (STATUS_TIME_LIMIT, STATUS_NODE_LIMIT)


@dataclass(frozen=True)
class MilpParams:
    gap_tol: float = 1e-4
    time_limit: Optional[float] = None
    node_limit: Optional[int] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.gap_tol >= 0:
            raise ValueError(f"gap_tol must be >= 0, got {self.gap_tol}")
        if self.time_limit is not None and not self.time_limit > 0:
            raise ValueError(f"time_limit must be positive, got {self.time_limit}")
        if self.node_limit is not None and self.node_limit < 1:
            raise ValueError(f"node_limit must be positive, got {self.node_limit}")


@dataclass(frozen=True)
class SolveStats:
    status: str
    nodes: int
    simplex_iters: int
    wall_time: float
    gap: float
    objective: Optional[float] = None
    root_bound: Optional[float] = None
    best_bound: Optional[float] = None

    @property
    def has_solution(self) -> bool:
        return self.objective is not None

    def to_dict(self) -> Dict[str, object]:
        return {
            "status": self.status,
            "nodes": self.nodes,
            "simplex_iters": self.simplex_iters,
            "wall_time": self.wall_time,
            "gap": self.gap if math.isfinite(self.gap) else None,
            "objective": self.objective,
            "root_bound": self.root_bound,
            "best_bound": self.best_bound,
        }


@dataclass(frozen=True, eq=False)
class MilpSolution:
    values: np.ndarray
    objective: float

    def assignment(self, prob: MilpProblem) -> Dict:
        return prob.assignment(self.values)


@dataclass(eq=False)
class _Node:
    bound: float
    lower: np.ndarray
    upper: np.ndarray
    basis: Optional[Basis]
    depth: int = 0


@dataclass
class _Search:
    prob: MilpProblem
    params: MilpParams
    integer_cols: np.ndarray
    nodes: int = 0
    iterations: int = 0
    incumbent: Optional[np.ndarray] = None
    incumbent_obj: float = math.inf
    stack: List[_Node] = field(default_factory=list)
    heap: List[Tuple[float, int, _Node]] = field(default_factory=list)
    seq: int = 0

    def lp(self, lower: np.ndarray, upper: np.ndarray, basis: Optional[Basis]) -> LpResult:
        result = solve_lp(self.prob, lower=lower, upper=upper, basis=basis)
        self.iterations += result.iterations
        if result.status == UNBOUNDED:
            raise SimplexError("LP relaxation is unbounded; bounded columns are required")
        return result

    # open-node bookkeeping: depth-first until an incumbent exists, best-bound afterwards
    def push(self, node: _Node) -> None:
        if self.incumbent is None:
            self.stack.append(node)
        else:
            self.seq += 1
            heapq.heappush(self.heap, (node.bound, self.seq, node))

    def pop(self) -> _Node:
        if self.stack:
            return self.stack.pop()
        return heapq.heappop(self.heap)[2]

    def has_open(self) -> bool:
        return bool(self.stack or self.heap)

    def open_bound(self) -> float:
        bounds = [node.bound for node in self.stack]
        if self.heap:
            bounds.append(self.heap[0][0])
        return min(bounds, default=math.inf)

    def to_best_bound(self) -> None:
        for node in self.stack:
            self.seq += 1
            self.heap.append((node.bound, self.seq, node))
        self.stack.clear()
        heapq.heapify(self.heap)

    def prunable(self, bound: float) -> bool:
        return bound >= self.incumbent_obj - PRUNE_TOL * max(1.0, abs(self.incumbent_obj))

    def gap(self) -> float:
        if self.incumbent is None:
            return math.inf
        bound = min(self.open_bound(), self.incumbent_obj)
        return max(0.0, (self.incumbent_obj - bound) / max(abs(self.incumbent_obj), 1.0))

    def offer(self, values: np.ndarray, objective: float) -> None:
        if objective < self.incumbent_obj - PRUNE_TOL * max(1.0, abs(objective)):
            first = self.incumbent is None
            self.incumbent = values
            self.incumbent_obj = objective
            LOGGER.debug("New incumbent %.6f after %s nodes", objective, self.nodes)
            if first:
                self.to_best_bound()

    def polish(self, values: np.ndarray, lower: np.ndarray, upper: np.ndarray, basis: Optional[Basis]) -> bool:
        """Fix the rounded integers and re-solve; only an optimal re-solve becomes an incumbent."""

        rounded = np.round(values[self.integer_cols])
        fixed_lo = lower.copy()
        fixed_hi = upper.copy()
        fixed_lo[self.integer_cols] = rounded
        fixed_hi[self.integer_cols] = rounded
        result = self.lp(fixed_lo, fixed_hi, basis)
        if result.status != OPTIMAL:
            LOGGER.warning("Fixed-integer re-solve ended %s; integral node discarded", result.status)
            return False
        self.offer(result.values, result.objective)
        return True

    def fractional(self, values: np.ndarray) -> Tuple[int, float]:
        if self.integer_cols.size == 0:
            return -1, 0.0
        x = values[self.integer_cols]
        frac = x - np.floor(x)
        distance = np.minimum(frac, 1.0 - frac)
        k = int(np.argmax(distance))
        if distance[k] <= INT_TOL:
            return -1, 0.0
        return int(self.integer_cols[k]), float(frac[k])


def _rounding_candidate(prob: MilpProblem, values: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Round commitments, repair startup/shutdown by the logic rows, and pin every integer column."""

    lower = prob.lower.copy()
    upper = prob.upper.copy()
    integer_cols = np.flatnonzero(prob.integer)
    rounded = np.clip(np.round(values[integer_cols]), lower[integer_cols], upper[integer_cols])
    lower[integer_cols] = rounded
    upper[integer_cols] = rounded
    by_unit: Dict[str, List[Tuple[int, int]]] = {}
    for i, key in enumerate(prob.keys):
        if key.kind == "U":
            by_unit.setdefault(key.ident, []).append((key.t, i))
    for unit, hours in by_unit.items():
        previous = float(prob.initial_commitment.get(unit, 0))
        for t, col in sorted(hours):
            current = lower[col]
            v_col = prob.index.get(VarKey("V", unit, t))
            w_col = prob.index.get(VarKey("W", unit, t))
            if v_col is not None and w_col is not None:
                lower[v_col] = upper[v_col] = max(0.0, current - previous)
                lower[w_col] = upper[w_col] = max(0.0, previous - current)
            previous = current
    return lower, upper


def solve_milp(prob: MilpProblem, params: MilpParams = MilpParams()) -> Tuple[Optional[MilpSolution], SolveStats]:
    """Branch and bound over the integer columns of ``prob``.

    Node selection is depth-first until the first incumbent and best-bound
    afterwards; branching picks the most fractional column, lowest index on
    ties. The rounding heuristic runs once at the root.
    """

    started = time.perf_counter()
    search = _Search(prob, params, np.flatnonzero(prob.integer))

    def finish(status: str, best_bound: Optional[float], root_bound: Optional[float]) -> Tuple[Optional[MilpSolution], SolveStats]:
        wall = time.perf_counter() - started
        if search.incumbent is None:
            gap = 0.0 if status == STATUS_INFEASIBLE else math.inf
            solution = None
            objective = None
        else:
            gap = 0.0 if status == STATUS_OPTIMAL else search.gap()
            solution = MilpSolution(search.incumbent, search.incumbent_obj)
            objective = search.incumbent_obj
        stats = SolveStats(
            status=status,
            nodes=search.nodes,
            simplex_iters=search.iterations,
            wall_time=wall,
            gap=gap,
            objective=objective,
            root_bound=root_bound,
            best_bound=best_bound,
        )
        LOGGER.info(
            "MILP %s: objective=%s nodes=%s iters=%s time=%.3fs",
            status,
            objective,
            stats.nodes,
            stats.simplex_iters,
            wall,
        )
        return solution, stats

    root = search.lp(prob.lower, prob.upper, None)
    search.nodes = 1
    if root.status == INFEASIBLE:
        return finish(STATUS_INFEASIBLE, None, None)
    root_bound = root.objective

    col, _ = search.fractional(root.values)
    if col < 0:
        if not search.polish(root.values, prob.lower, prob.upper, root.basis):
            raise SimplexError("integral root relaxation failed to re-solve with its integers fixed")
        return finish(STATUS_OPTIMAL, search.incumbent_obj, root_bound)

    lower, upper = _rounding_candidate(prob, root.values)
    trial = search.lp(lower, upper, root.basis)
    if trial.status == OPTIMAL:
        search.offer(trial.values, trial.objective)

    def branch(result: LpResult, lower: np.ndarray, upper: np.ndarray, depth: int) -> None:
        col, frac = search.fractional(result.values)
        if col < 0:
            search.polish(result.values, lower, upper, result.basis)
            return
        value = result.values[col]
        down_hi = upper.copy()
        down_hi[col] = math.floor(value)
        up_lo = lower.copy()
        up_lo[col] = math.ceil(value)
        down = _Node(result.objective, lower, down_hi, result.basis, depth + 1)
        up = _Node(result.objective, up_lo, upper, result.basis, depth + 1)
        near, far = (up, down) if frac >= 0.5 else (down, up)
        search.push(far)
        search.push(near)

    branch(root, prob.lower, prob.upper, 0)

    while search.has_open():
        if search.incumbent is not None and params.gap_tol > 0 and search.gap() <= params.gap_tol:
            return finish(STATUS_GAP_LIMIT, min(search.open_bound(), search.incumbent_obj), root_bound)
        if params.time_limit is not None and time.perf_counter() - started >= params.time_limit:
            return finish(STATUS_TIME_LIMIT, min(search.open_bound(), search.incumbent_obj), root_bound)
        if params.node_limit is not None and search.nodes >= params.node_limit:
            return finish(STATUS_NODE_LIMIT, min(search.open_bound(), search.incumbent_obj), root_bound)

        node = search.pop()
        if search.incumbent is not None and search.prunable(node.bound):
            # best-bound order: every remaining node is at least as bad
            search.heap.clear()
            continue
        result = search.lp(node.lower, node.upper, node.basis)
        search.nodes += 1
        if search.nodes % 500 == 0:
            LOGGER.debug("%s nodes, %s open, incumbent %s", search.nodes, len(search.heap) + len(search.stack), search.incumbent_obj)
        if result.status == INFEASIBLE:
            continue
        if search.incumbent is not None and search.prunable(result.objective):
            continue
        branch(result, node.lower, node.upper, node.depth)

    if search.incumbent is None:
        return finish(STATUS_INFEASIBLE, None, root_bound)
    return finish(STATUS_OPTIMAL, search.incumbent_obj, root_bound)


def warm_restricted_solve(
    prob: MilpProblem, mask: FreezeMask, params: MilpParams = MilpParams()
) -> Tuple[Optional[MilpSolution], SolveStats]:
    """Solve ``prob`` inside the region left by ``mask``; stats cover only this solve."""

    return solve_milp(fix_commitments(prob, mask), params)
