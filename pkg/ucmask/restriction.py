"""Pre-solve screening, reduction metrics and the restricted solve pipeline."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .formulation import (
    BALANCE,
    FLOW,
    LINE_LIMIT,
    REFERENCE,
    ConstraintReport,
    MilpProblem,
    VarKey,
    build_uc_milp,
    evaluate_solution,
)
from .instance import UcInstance
from .mask import FreezeMask
from .maskgen.base import MaskFeedback, MaskGenerator
from .simplex import solve_lp
from .solver import STATUS_INFEASIBLE, MilpParams, MilpSolution, SolveStats, warm_restricted_solve

LOGGER = logging.getLogger(__name__)

CAPACITY_CHECK = "capacity"
LOGIC_CHECK = "up/down logic"
RAMP_CHECK = "ramping"

_SLACK = 1e-6
_NETWORK_FAMILIES = (BALANCE, FLOW, LINE_LIMIT, REFERENCE)


@dataclass(frozen=True)
class ScreenReason:
    check: str
    hour: int
    generator: Optional[str]
    detail: str
    implicated: Tuple[Tuple[int, str], ...] = ()

    def __str__(self) -> str:
        where = f"hour {self.hour}" + (f", {self.generator}" if self.generator else "")
        return f"{self.check} ({where}): {self.detail}"


@dataclass(frozen=True)
class ScreenReport:
    reasons: Tuple[ScreenReason, ...] = ()

    @property
    def accepted(self) -> bool:
        return not self.reasons

    @property
    def implicated(self) -> Tuple[Tuple[int, str], ...]:
        seen: Dict[Tuple[int, str], None] = {}
        for reason in self.reasons:
            for pair in reason.implicated:
                seen.setdefault(pair, None)
        return tuple(seen)

    def summary(self) -> str:
        if self.accepted:
            return "mask accepted"
        return "\n".join(f"- {reason}" for reason in self.reasons)


def _hour_demand(inst: UcInstance) -> np.ndarray:
    return np.concatenate([[np.nan], inst.total_demand()])


def _capacity_reasons(inst: UcInstance, frozen: Dict[Tuple[int, str], int]) -> List[ScreenReason]:
    reasons = []
    demand = _hour_demand(inst)
    for t in range(1, inst.horizon + 1):
        off = [gen.id for gen in inst.generators if frozen.get((t, gen.id)) == 0]
        available = sum(gen.p_max for gen in inst.generators if gen.id not in off)
        if available + _SLACK < demand[t]:
            reasons.append(
                ScreenReason(
                    CAPACITY_CHECK,
                    t,
                    None,
                    f"unfrozen capacity {available:g} MW cannot meet demand {demand[t]:g} MW",
                    tuple((t, g) for g in off),
                )
            )
    return reasons


def _logic_reasons(inst: UcInstance, frozen: Dict[Tuple[int, str], int]) -> List[ScreenReason]:
    reasons = []
    for gen in inst.generators:
        known = sorted((t, u) for (t, g), u in frozen.items() if g == gen.id)
        if gen.u0 == 1:
            window, forced = gen.ut - gen.init_duration, 1
        else:
            window, forced = gen.dt - gen.init_duration, 0
        for t, u in known:
            if t <= window and u != forced:
                reasons.append(
                    ScreenReason(
                        LOGIC_CHECK,
                        t,
                        gen.id,
                        f"initial status {gen.u0} must hold through hour {window}",
                        ((t, gen.id),),
                    )
                )
        points = [(0, gen.u0)] + known
        for k in range(1, len(points)):
            (a, before), (b, after) = points[k - 1], points[k]
            if before == after:
                continue
            # a transition happens in (a, b], so the new status holds through a + UT (or a + DT)
            hold = gen.ut if after == 1 else gen.dt
            for c, later in points[k + 1 :]:
                if c > a + hold:
                    break
                if later != after:
                    kind = "startup" if after == 1 else "shutdown"
                    implicated = tuple((t, gen.id) for t in (b, c) if t >= 1)
                    reasons.append(
                        ScreenReason(
                            LOGIC_CHECK,
                            c,
                            gen.id,
                            f"{kind} implied between hours {a} and {b} must hold through hour {a + hold}",
                            implicated,
                        )
                    )
                    break
    return reasons


def _ramp_reasons(inst: UcInstance, frozen: Dict[Tuple[int, str], int]) -> List[ScreenReason]:
    reasons = []
    demand = _hour_demand(inst)
    if inst.horizon >= 1:
        top = 0.0
        bottom = 0.0
        for gen in inst.generators:
            status = frozen.get((1, gen.id))
            if status == 0:
                continue
            if gen.u0 == 1:
                top += min(gen.p_max, gen.p0 + gen.r_hr)
                bottom += max(gen.p_min, gen.p0 - gen.r_hr) if status == 1 else max(0.0, gen.p0 - gen.r_hr - gen.r_sd)
            else:
                top += min(gen.p_max, gen.r_su)
                bottom += gen.p_min if status == 1 else 0.0
        pairs = tuple((1, g) for (t, g) in frozen if t == 1)
        if top + _SLACK < demand[1]:
            reasons.append(
                ScreenReason(RAMP_CHECK, 1, None, f"reachable output {top:g} MW below demand {demand[1]:g} MW", pairs)
            )
        if bottom - _SLACK > demand[1]:
            reasons.append(
                ScreenReason(RAMP_CHECK, 1, None, f"minimum output {bottom:g} MW above demand {demand[1]:g} MW", pairs)
            )
    for t in range(2, inst.horizon + 1):
        rise = 0.0
        fall = 0.0
        for gen in inst.generators:
            prev, cur = frozen.get((t - 1, gen.id)), frozen.get((t, gen.id))
            if cur == 0:
                pass
            elif prev == 0 and cur == 1:
                rise += min(gen.p_max, gen.r_su)
            elif prev == 1 and cur == 1:
                rise += min(gen.p_max, gen.r_hr)
            else:
                rise += min(gen.p_max, max(gen.r_hr, gen.r_su))
            if prev == 0:
                pass
            elif prev == 1 and cur == 0:
                fall += min(gen.p_max, gen.r_sd)
            elif prev == 1 and cur == 1:
                fall += min(gen.p_max, gen.r_hr)
            else:
                fall += min(gen.p_max, max(gen.r_hr, gen.r_sd))
        step = demand[t] - demand[t - 1]
        pairs = tuple((h, g) for (h, g) in frozen if h in (t - 1, t))
        if rise + _SLACK < step:
            reasons.append(
                ScreenReason(RAMP_CHECK, t, None, f"upward ramp capability {rise:g} MW below load rise {step:g} MW", pairs)
            )
        if fall + _SLACK < -step:
            reasons.append(
                ScreenReason(RAMP_CHECK, t, None, f"downward ramp capability {fall:g} MW below load drop {-step:g} MW", pairs)
            )
    return reasons


def screen_mask(inst: UcInstance, mask: FreezeMask) -> ScreenReport:
    """Run the capacity, up/down-logic and ramping necessary conditions and report every failure."""

    frozen = mask.as_dict()
    reasons = _capacity_reasons(inst, frozen) + _logic_reasons(inst, frozen) + _ramp_reasons(inst, frozen)
    report = ScreenReport(tuple(reasons))
    if not report.accepted:
        LOGGER.info("Mask rejected by screening with %s reasons", len(reasons))
    return report


def propagated_fixings(prob: MilpProblem, mask: FreezeMask) -> np.ndarray:
    """Boolean per column: fixed by bounds, by the mask, or implied for V/W by consecutive known U."""

    fixed = prob.lower == prob.upper
    status: Dict[Tuple[str, int], float] = {(g, 0): float(u) for g, u in prob.initial_commitment.items()}
    for i, key in enumerate(prob.keys):
        if key.kind == "U" and fixed[i]:
            status[(key.ident, key.t)] = float(prob.lower[i])
    for entry in mask.entries:
        col = prob.index.get(VarKey("U", entry.g, entry.t))
        if col is not None:
            fixed[col] = True
            status[(entry.g, entry.t)] = float(entry.u)
    for i, key in enumerate(prob.keys):
        if key.kind in ("V", "W") and (key.ident, key.t) in status and (key.ident, key.t - 1) in status:
            fixed[i] = True
    return fixed


def reduction_metrics(prob: MilpProblem, mask: FreezeMask) -> Tuple[float, float]:
    """Percent of binary columns and of rows fully determined after fixing and propagation."""

    if not mask.entries:
        return 0.0, 0.0
    fixed = propagated_fixings(prob, mask)
    baseline = propagated_fixings(prob, FreezeMask.empty(mask.k_cap))
    binaries = prob.integer
    var_pct = 100.0 * float(np.count_nonzero(fixed & binaries & ~baseline)) / max(1, int(binaries.sum()))
    pattern = prob.matrix.copy()
    pattern.data = np.ones_like(pattern.data)
    free_after = pattern @ (~fixed).astype(float)
    free_before = pattern @ (~baseline).astype(float)
    newly_closed = (free_after == 0) & (free_before > 0)
    con_pct = 100.0 * float(np.count_nonzero(newly_closed)) / max(1, prob.num_rows)
    return var_pct, con_pct


@dataclass(frozen=True)
class PipelineOptions:
    screen: bool = True
    validate: bool = True
    max_retries: int = 1

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError(f"max_retries must be >= 0, got {self.max_retries}")


@dataclass(frozen=True, eq=False)
class PipelineResult:
    solution: Optional[MilpSolution]
    stats: SolveStats
    screen: ScreenReport
    violations: ConstraintReport
    mask: FreezeMask
    attempts: int = 1
    fell_back: bool = False
    attempt_stats: Tuple[SolveStats, ...] = field(default_factory=tuple)

    @property
    def solve_time(self) -> float:
        return sum(stats.wall_time for stats in self.attempt_stats) or self.stats.wall_time

    @property
    def total_nodes(self) -> int:
        return sum(stats.nodes for stats in self.attempt_stats) or self.stats.nodes


def economic_dispatch(prob: MilpProblem, solution: MilpSolution) -> np.ndarray:
    """Re-dispatch with every integer column fixed to its rounded value."""

    cols = np.flatnonzero(prob.integer)
    lower = prob.lower.copy()
    upper = prob.upper.copy()
    rounded = np.round(solution.values[cols])
    lower[cols] = rounded
    upper[cols] = rounded
    result = solve_lp(prob, lower=lower, upper=upper)
    return result.values if result.optimal else solution.values


def screening_feedback(report: ScreenReport) -> MaskFeedback:
    text = (
        "The proposed mask failed pre-solve screening. "
        "The unfrozen generators cannot meet demand at each hour or the frozen statuses break "
        "minimum up/down or ramping requirements:\n"
        f"{report.summary()}\nReturn a revised mask."
    )
    return MaskFeedback(text, report.implicated)


def validation_feedback(report: ConstraintReport, mask: FreezeMask) -> MaskFeedback:
    implicated: Dict[Tuple[int, str], None] = {}
    for violation in report.violations:
        if violation.family in _NETWORK_FAMILIES:
            for entry in mask.entries:
                if entry.t == violation.t:
                    implicated.setdefault((entry.t, entry.g), None)
        elif (violation.t, violation.ident) in mask.as_dict():
            implicated.setdefault((violation.t, violation.ident), None)
    text = (
        "The restricted schedule violates constraints of the original problem. "
        f"Binding constraints:\n{report.summary()}\nReturn a revised mask."
    )
    return MaskFeedback(text, tuple(implicated))


def infeasible_feedback(mask: FreezeMask) -> MaskFeedback:
    text = (
        "The restricted problem has no feasible schedule. Every frozen commitment is suspect; "
        "restrict fewer units and let the solver determine the remaining commitments."
    )
    return MaskFeedback(text, tuple((entry.t, entry.g) for entry in mask.entries))


def restricted_pipeline(
    inst: UcInstance,
    mask: FreezeMask,
    params: MilpParams = MilpParams(),
    options: PipelineOptions = PipelineOptions(),
    generator: Optional[MaskGenerator] = None,
    prob: Optional[MilpProblem] = None,
) -> PipelineResult:
    """Screen, fix, solve and validate a mask, asking ``generator`` for revisions on failure.

    When retries run out the unrestricted problem is solved instead and the
    result is flagged ``fell_back``.
    """

    prob = prob if prob is not None else build_uc_milp(inst)
    mask.check_against(inst)
    current = mask
    screen = ScreenReport()
    attempts = 0
    retries = 0
    fell_back = False
    history: List[SolveStats] = []

    def next_mask(feedback: MaskFeedback) -> Optional[FreezeMask]:
        nonlocal retries
        if generator is not None and retries < options.max_retries:
            retries += 1
            revised = generator.revise(inst, current, feedback)
            revised.check_against(inst)
            return revised
        return None

    def fallback() -> FreezeMask:
        nonlocal fell_back
        fell_back = True
        LOGGER.warning("Falling back to the unrestricted problem after %s attempts", attempts)
        return FreezeMask.empty(current.k_cap, provenance="unrestricted-fallback")

    while True:
        if options.screen and current.entries:
            report = screen_mask(inst, current)
            if not report.accepted:
                screen = report
                revised = next_mask(screening_feedback(report))
                current = revised if revised is not None else fallback()
                continue
            if not fell_back:
                screen = report

        attempts += 1
        solution, stats = warm_restricted_solve(prob, current, params)
        history.append(stats)
        violations = ConstraintReport()
        if not options.validate:
            break
        if stats.status == STATUS_INFEASIBLE and current.entries:
            revised = next_mask(infeasible_feedback(current))
            current = revised if revised is not None else fallback()
            continue
        if solution is None:
            break
        dispatched = economic_dispatch(prob, solution)
        violations = evaluate_solution(inst, prob.assignment(dispatched))
        if violations.ok or not current.entries:
            break
        revised = next_mask(validation_feedback(violations, current))
        current = revised if revised is not None else fallback()

    return PipelineResult(
        solution=solution,
        stats=stats,
        screen=screen,
        violations=violations,
        mask=current,
        attempts=attempts,
        fell_back=fell_back,
        attempt_stats=tuple(history),
    )
