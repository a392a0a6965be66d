"""Bounded-variable primal simplex with sparse LU factors and product-form updates.

Rows are turned into logical columns so that ``[A  -I] [x; r] = 0`` with
``r`` bounded by the row sense. Nonbasic columns always sit at a finite bound.
A single loop runs phase 1 (sum of basic bound violations) while the basis is
infeasible and phase 2 afterwards, so warm starts after bound changes need no
special handling.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .formulation import EQ, GE, LE, MilpProblem

LOGGER = logging.getLogger(__name__)

FEAS_TOL = 1e-9
DUAL_TOL = 1e-9
PIVOT_TOL = 1e-9
STEP_TOL = 1e-12
REFACTOR_EVERY = 50
STALL_LIMIT = 1000

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"


class SimplexError(RuntimeError):
    """Raised when the LP engine cannot make numerical progress."""


class SingularBasisError(SimplexError):
    pass


@dataclass(frozen=True)
class Basis:
    """Basic column indices plus the nonbasic columns resting at their upper bound.

    Indices address the augmented column space: structurals first, then one
    logical per row.
    """

    basic: Tuple[int, ...]
    at_upper: Tuple[int, ...] = ()


@dataclass(frozen=True, eq=False)
class LpResult:
    status: str
    objective: float
    values: np.ndarray
    iterations: int
    basis: Optional[Basis] = None
    reduced_costs: Optional[np.ndarray] = None

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


class _Factor:
    def __init__(self, matrix: sp.csc_matrix, basic: np.ndarray) -> None:
        try:
            self.lu = splu(matrix[:, basic].tocsc())
        except RuntimeError as exc:
            raise SingularBasisError(f"basis matrix is singular: {exc}") from exc
        self.etas: List[Tuple[int, np.ndarray]] = []

    def ftran(self, column: np.ndarray) -> np.ndarray:
        y = self.lu.solve(column)
        for r, alpha in self.etas:
            yr = y[r] / alpha[r]
            y -= alpha * yr
            y[r] = yr
        return y

    def btran(self, cost: np.ndarray) -> np.ndarray:
        z = np.array(cost, dtype=float)
        for r, alpha in reversed(self.etas):
            z[r] = (z[r] - (alpha @ z - alpha[r] * z[r])) / alpha[r]
        return self.lu.solve(z, trans="T")

    def update(self, r: int, alpha: np.ndarray) -> None:
        self.etas.append((r, alpha.copy()))


def _row_bounds(prob: MilpProblem) -> Tuple[np.ndarray, np.ndarray]:
    m = prob.num_rows
    lo = np.full(m, -np.inf)
    hi = np.full(m, np.inf)
    for i, sense in enumerate(prob.senses):
        if sense in (GE, EQ):
            lo[i] = prob.rhs[i]
        if sense in (LE, EQ):
            hi[i] = prob.rhs[i]
    return lo, hi


class _BoundedSimplex:
    def __init__(self, prob: MilpProblem, lower: np.ndarray, upper: np.ndarray, max_iter: Optional[int]) -> None:
        A = prob.matrix.tocsc()
        self.m, self.n = A.shape
        self.matrix = sp.hstack([A, -sp.identity(self.m, format="csc")], format="csc")
        self.matrix_t = self.matrix.T.tocsr()
        row_lo, row_hi = _row_bounds(prob)
        self.lb = np.concatenate([np.asarray(lower, dtype=float), row_lo])
        self.ub = np.concatenate([np.asarray(upper, dtype=float), row_hi])
        self.cost = np.concatenate([prob.cost, np.zeros(self.m)])
        self.size = self.n + self.m
        self.max_iter = max_iter if max_iter is not None else max(10_000, 50 * self.size)
        self.x = np.zeros(self.size)
        self.basic = np.zeros(self.m, dtype=int)
        self.is_basic = np.zeros(self.size, dtype=bool)
        self.at_upper = np.zeros(self.size, dtype=bool)
        self.factor: Optional[_Factor] = None
        self.iterations = 0

    # -- setup -----------------------------------------------------------
    def _column(self, j: int) -> np.ndarray:
        out = np.zeros(self.m)
        start, end = self.matrix.indptr[j], self.matrix.indptr[j + 1]
        out[self.matrix.indices[start:end]] = self.matrix.data[start:end]
        return out

    def _place_nonbasic(self) -> None:
        for j in np.flatnonzero(~self.is_basic):
            lo, hi = self.lb[j], self.ub[j]
            if self.at_upper[j] and np.isfinite(hi):
                self.x[j] = hi
            elif np.isfinite(lo):
                self.x[j] = lo
                self.at_upper[j] = False
            elif np.isfinite(hi):
                self.x[j] = hi
                self.at_upper[j] = True
            else:
                raise SimplexError(f"column {j} is free; finite bounds are required")
        self.at_upper[self.is_basic] = False

    def _recompute_basics(self) -> None:
        nonbasic = np.where(self.is_basic, 0.0, self.x)
        values = self.factor.ftran(-(self.matrix @ nonbasic))
        if not np.all(np.isfinite(values)):
            raise SingularBasisError("basis is numerically singular")
        self.x[self.basic] = values

    def _refactor(self) -> None:
        self.factor = _Factor(self.matrix, self.basic)
        self._recompute_basics()

    def _install(self, basic: np.ndarray, at_upper: np.ndarray) -> None:
        self.basic = np.array(basic, dtype=int)
        self.is_basic[:] = False
        self.is_basic[self.basic] = True
        self.at_upper[:] = False
        self.at_upper[np.asarray(at_upper, dtype=int)] = True
        self._place_nonbasic()
        self._refactor()

    def start(self, basis: Optional[Basis]) -> None:
        if basis is not None:
            basic = np.array(basis.basic, dtype=int)
            if (
                basic.shape == (self.m,)
                and np.unique(basic).size == self.m
                and (self.m == 0 or (basic.min() >= 0 and basic.max() < self.size))
                and all(0 <= j < self.size for j in basis.at_upper)
            ):
                try:
                    self._install(basic, np.array(basis.at_upper, dtype=int))
                    return
                except SingularBasisError:
                    LOGGER.debug("Warm-start basis is singular; starting from the slack basis")
        self._install(np.arange(self.n, self.size), np.zeros(0, dtype=int))

    # -- main loop -------------------------------------------------------
    def run(self) -> Tuple[str, np.ndarray]:
        bland = False
        stalled = 0
        fresh = True
        reduced = np.zeros(self.size)
        while True:
            if self.iterations >= self.max_iter:
                raise SimplexError(f"no convergence after {self.iterations} iterations")
            if len(self.factor.etas) >= REFACTOR_EVERY:
                self._refactor()
                fresh = True

            xb = self.x[self.basic]
            lo_b, hi_b = self.lb[self.basic], self.ub[self.basic]
            slack = FEAS_TOL * (1.0 + np.abs(xb))
            below = xb < lo_b - slack
            above = xb > hi_b + slack
            phase_one = bool(below.any() or above.any())
            if phase_one:
                cost_b = np.where(below, -1.0, np.where(above, 1.0, 0.0))
                full_cost = np.zeros(self.size)
            else:
                cost_b = self.cost[self.basic]
                full_cost = self.cost
            y = self.factor.btran(cost_b)
            reduced = full_cost - self.matrix_t @ y
            reduced[self.basic] = 0.0

            movable = ~self.is_basic & (self.ub > self.lb)
            eligible = movable & (
                (~self.at_upper & (reduced < -DUAL_TOL)) | (self.at_upper & (reduced > DUAL_TOL))
            )
            if not eligible.any():
                if not fresh:
                    self._refactor()
                    fresh = True
                    continue
                return (INFEASIBLE if phase_one else OPTIMAL), reduced

            if bland:
                q = int(np.flatnonzero(eligible)[0])
            else:
                q = int(np.argmax(np.where(eligible, np.abs(reduced), -1.0)))
            direction = -1.0 if self.at_upper[q] else 1.0
            alpha = self.factor.ftran(self._column(q))
            delta = -direction * alpha

            limits = np.full(self.m, np.inf)
            to_upper = np.zeros(self.m, dtype=bool)
            usable = np.abs(delta) > PIVOT_TOL
            feasible = ~below & ~above
            with np.errstate(invalid="ignore"):
                falling = usable & (delta < 0)
                rising = usable & (delta > 0)
                sel = falling & feasible
                limits[sel] = (xb[sel] - lo_b[sel]) / -delta[sel]
                sel = rising & feasible
                limits[sel] = (hi_b[sel] - xb[sel]) / delta[sel]
                to_upper[sel] = True
                sel = rising & below
                limits[sel] = (lo_b[sel] - xb[sel]) / delta[sel]
                sel = falling & above
                limits[sel] = (xb[sel] - hi_b[sel]) / -delta[sel]
                to_upper[sel] = True
            limits = np.maximum(limits, 0.0)

            flip = self.ub[q] - self.lb[q]
            best = float(limits.min()) if self.m else np.inf
            if not np.isfinite(best) and not np.isfinite(flip):
                if phase_one:
                    raise SimplexError("phase 1 ray without a blocking row")
                return UNBOUNDED, reduced

            self.iterations += 1
            fresh = False
            if flip <= best:
                step = flip
                self.x[self.basic] += delta * step
                self.at_upper[q] = not self.at_upper[q]
                self.x[q] = self.ub[q] if self.at_upper[q] else self.lb[q]
            else:
                step = best
                ties = np.flatnonzero(limits <= best + STEP_TOL)
                if bland:
                    r = int(ties[np.argmin(self.basic[ties])])
                else:
                    r = int(ties[np.argmax(np.abs(delta[ties]))])
                leaving = int(self.basic[r])
                self.x[self.basic] += delta * step
                self.x[q] += direction * step
                self.x[leaving] = self.ub[leaving] if to_upper[r] else self.lb[leaving]
                self.at_upper[leaving] = bool(to_upper[r])
                self.is_basic[leaving] = False
                self.is_basic[q] = True
                self.at_upper[q] = False
                self.basic[r] = q
                self.factor.update(r, alpha)

            if step < STEP_TOL:
                stalled += 1
                if not bland and stalled >= STALL_LIMIT:
                    LOGGER.debug("Switching to Bland's rule after %s degenerate pivots", stalled)
                    bland = True
            else:
                stalled = 0
                bland = False

    def basis(self) -> Basis:
        at_upper = np.flatnonzero(self.at_upper & ~self.is_basic)
        return Basis(tuple(int(j) for j in self.basic), tuple(int(j) for j in at_upper))


def _trivial(prob: MilpProblem, lower: np.ndarray, upper: np.ndarray) -> LpResult:
    values = np.where(prob.cost >= 0, lower, upper)
    if not np.all(np.isfinite(values)):
        return LpResult(UNBOUNDED, -np.inf, values, 0)
    return LpResult(OPTIMAL, float(prob.cost @ values), values, 0, Basis(()), prob.cost.copy())


def solve_lp(
    prob: MilpProblem,
    *,
    lower: Optional[np.ndarray] = None,
    upper: Optional[np.ndarray] = None,
    basis: Optional[Basis] = None,
    max_iter: Optional[int] = None,
) -> LpResult:
    """Solve the LP relaxation of ``prob`` (integrality ignored).

    ``lower``/``upper`` override the column bounds without copying the
    problem; ``basis`` warm-starts from a previous solve of the same rows.
    """

    lower = prob.lower if lower is None else np.asarray(lower, dtype=float)
    upper = prob.upper if upper is None else np.asarray(upper, dtype=float)
    if np.any(lower > upper + FEAS_TOL):
        return LpResult(INFEASIBLE, np.inf, np.clip(np.zeros(prob.num_columns), lower, upper), 0)
    if prob.num_rows == 0:
        return _trivial(prob, lower, upper)

    engine = _BoundedSimplex(prob, lower, upper, max_iter)
    engine.start(basis)
    status, reduced = engine.run()
    values = engine.x[: engine.n].copy()
    if status == OPTIMAL:
        values = np.clip(values, lower, upper)
        objective = float(prob.cost @ values)
    elif status == INFEASIBLE:
        objective = np.inf
    else:
        objective = -np.inf
    LOGGER.debug("LP %s after %s iterations (objective %s)", status, engine.iterations, objective)
    return LpResult(
        status=status,
        objective=objective,
        values=values,
        iterations=engine.iterations,
        basis=engine.basis(),
        reduced_costs=reduced[: engine.n].copy() if status == OPTIMAL else None,
    )
