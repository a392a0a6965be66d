"""Experiment designs: method comparison, noise sweeps, long-horizon runs and scaling."""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, TypeVar

import numpy as np

from . import util
from .formulation import MilpProblem, build_uc_milp, evaluate_solution, schedule_from_solution
from .instance import (
    DailySchedule,
    HistoryBank,
    HistoryDay,
    UcInstance,
    augment_instance,
    perturb_demand,
)
from .maskgen import HISTORY_METHODS, build_generator
from .restriction import PipelineOptions, reduction_metrics, restricted_pipeline
from .schemas import EndpointConfig
from .solver import MilpParams, MilpSolution, SolveStats, solve_milp

LOGGER = logging.getLogger(__name__)

BASELINE = "milp"
STATUS_ERROR = "error"
CSV_FIELDS = [
    "instance_id",
    "method",
    "status",
    "objective",
    "nodes",
    "simplex_iters",
    "solve_time_s",
    "maskgen_time_s",
    "var_red_pct",
    "con_red_pct",
    "cost_err_pct",
    "mask_provenance",
    "screen_accepted",
    "violations",
    "sigma",
    "trial",
]
TIMING_FIELDS = ("solve_time_s", "maskgen_time_s")

T = TypeVar("T")


@dataclass(frozen=True)
class MethodSpec:
    """A mask-generation method plus its parameters (seed is derived per run)."""

    name: str
    H: int = 3
    k_cap: Optional[int] = None
    k_neighbors: int = 5
    n_clusters: Optional[int] = None
    ratio: float = 0.1
    endpoint: Optional[EndpointConfig] = field(default=None, compare=False)

    def build(self, seed: int):
        return build_generator(
            self.name,
            H=self.H,
            k_cap=self.k_cap,
            k_neighbors=self.k_neighbors,
            n_clusters=self.n_clusters,
            ratio=self.ratio,
            seed=seed,
            endpoint=self.endpoint,
        )

    @property
    def needs_history(self) -> bool:
        return self.name in HISTORY_METHODS


@dataclass(frozen=True)
class RunRecord:
    instance_id: str
    method: str
    status: str
    objective: Optional[float]
    nodes: int
    simplex_iters: int
    solve_time_s: float
    maskgen_time_s: float
    var_red_pct: float
    con_red_pct: float
    cost_err_pct: Optional[float]
    mask_provenance: str
    screen_accepted: bool
    violations: int
    sigma: float = 0.0
    trial: int = 0
    schedule: Optional[DailySchedule] = field(default=None, compare=False, repr=False)
    initial_status: Tuple[int, ...] = field(default=(), compare=False, repr=False)

    def to_row(self) -> Dict[str, str]:
        row = {}
        for name in CSV_FIELDS:
            value = getattr(self, name)
            if value is None:
                row[name] = ""
            elif isinstance(value, bool):
                row[name] = "true" if value else "false"
            elif isinstance(value, float):
                row[name] = repr(value)
            else:
                row[name] = str(value)
        return row

    @classmethod
    def from_row(cls, row: Mapping[str, str]) -> "RunRecord":
        def number(key: str) -> Optional[float]:
            return float(row[key]) if row[key] != "" else None

        return cls(
            instance_id=row["instance_id"],
            method=row["method"],
            status=row["status"],
            objective=number("objective"),
            nodes=int(row["nodes"]),
            simplex_iters=int(row["simplex_iters"]),
            solve_time_s=float(row["solve_time_s"]),
            maskgen_time_s=float(row["maskgen_time_s"]),
            var_red_pct=float(row["var_red_pct"]),
            con_red_pct=float(row["con_red_pct"]),
            cost_err_pct=number("cost_err_pct"),
            mask_provenance=row["mask_provenance"],
            screen_accepted=row["screen_accepted"] == "true",
            violations=int(row["violations"]),
            sigma=float(row["sigma"]),
            trial=int(row["trial"]),
        )


@dataclass(frozen=True)
class MethodAggregate:
    method: str
    runs: int
    solved: int
    avg_cost: Optional[float]
    avg_time: float
    max_time: float
    avg_nodes: float
    avg_cost_err: Optional[float]
    max_cost_err: Optional[float]
    time_reduction_pct: float
    node_reduction_pct: float
    var_red_pct: float
    con_red_pct: float


@dataclass(frozen=True)
class ComparisonTable:
    rows: Tuple[MethodAggregate, ...]

    def row(self, method: str) -> MethodAggregate:
        for row in self.rows:
            if row.method == method:
                return row
        raise KeyError(method)

    @property
    def methods(self) -> Tuple[str, ...]:
        return tuple(row.method for row in self.rows)

    def to_dict(self) -> Dict[str, object]:
        return {"methods": [asdict(row) for row in self.rows]}


@dataclass(frozen=True, eq=False)
class ComparisonResult:
    table: ComparisonTable
    records: Tuple[RunRecord, ...]
    baseline: Optional[DailySchedule] = None


def _mean(values: Sequence[float]) -> Optional[float]:
    return float(sum(values) / len(values)) if values else None


def aggregate(records: Iterable[RunRecord], baseline: str = BASELINE) -> ComparisonTable:
    """Reduce run records to per-method aggregates, in order of first appearance."""

    groups: Dict[str, List[RunRecord]] = {}
    for record in records:
        groups.setdefault(record.method, []).append(record)

    def summary(method: str, group: List[RunRecord]) -> Dict[str, object]:
        solved = [r for r in group if r.objective is not None]
        errors = [r.cost_err_pct for r in group if r.cost_err_pct is not None]
        times = [r.solve_time_s for r in group]
        return {
            "runs": len(group),
            "solved": len(solved),
            "avg_cost": _mean([r.objective for r in solved]),
            "avg_time": _mean(times) or 0.0,
            "max_time": max(times, default=0.0),
            "avg_nodes": _mean([float(r.nodes) for r in group]) or 0.0,
            "avg_cost_err": _mean(errors),
            "max_cost_err": max(errors, default=None),
            "var_red_pct": _mean([r.var_red_pct for r in group]) or 0.0,
            "con_red_pct": _mean([r.con_red_pct for r in group]) or 0.0,
        }

    base = summary(baseline, groups[baseline]) if baseline in groups else None
    rows = []
    for method, group in groups.items():
        stats = summary(method, group)
        time_red = node_red = 0.0
        if method != baseline and base is not None:
            if base["avg_time"] > 0:
                time_red = util.time_reduction(base["avg_time"], stats["avg_time"])
            if base["avg_nodes"] > 0:
                node_red = 100.0 * (1.0 - stats["avg_nodes"] / base["avg_nodes"])
        if method == baseline:
            stats["var_red_pct"] = stats["con_red_pct"] = 0.0
        rows.append(MethodAggregate(method=method, time_reduction_pct=time_red, node_reduction_pct=node_red, **stats))
    return ComparisonTable(tuple(rows))


def _cost_error(objective: Optional[float], baseline: Optional[float]) -> Optional[float]:
    if objective is None or baseline is None:
        return None
    if baseline > 0:
        return util.relative_error(objective, baseline)
    return 0.0 if abs(objective - baseline) <= 1e-9 else None


def _violation_count(inst: UcInstance, prob: MilpProblem, solution: Optional[MilpSolution]) -> int:
    if solution is None:
        return 0
    return len(evaluate_solution(inst, prob.assignment(solution.values)).violations)


def _initial_status(inst: UcInstance) -> Tuple[int, ...]:
    return tuple(gen.u0 for gen in inst.generators)


def _baseline_record(
    inst: UcInstance, prob: MilpProblem, solution: Optional[MilpSolution], stats: SolveStats, sigma: float, trial: int
) -> RunRecord:
    return RunRecord(
        instance_id=inst.name,
        method=BASELINE,
        status=stats.status,
        objective=stats.objective,
        nodes=stats.nodes,
        simplex_iters=stats.simplex_iters,
        solve_time_s=stats.wall_time,
        maskgen_time_s=0.0,
        var_red_pct=0.0,
        con_red_pct=0.0,
        cost_err_pct=0.0 if stats.objective is not None else None,
        mask_provenance="empty",
        screen_accepted=True,
        violations=_violation_count(inst, prob, solution),
        sigma=sigma,
        trial=trial,
        schedule=schedule_from_solution(inst, prob, solution.values) if solution is not None else None,
        initial_status=_initial_status(inst),
    )


def _error_record(inst: UcInstance, method: str, sigma: float, trial: int) -> RunRecord:
    return RunRecord(
        instance_id=inst.name,
        method=method,
        status=STATUS_ERROR,
        objective=None,
        nodes=0,
        simplex_iters=0,
        solve_time_s=0.0,
        maskgen_time_s=0.0,
        var_red_pct=0.0,
        con_red_pct=0.0,
        cost_err_pct=None,
        mask_provenance="none",
        screen_accepted=False,
        violations=0,
        sigma=sigma,
        trial=trial,
        initial_status=_initial_status(inst),
    )


def run_comparison(
    inst: UcInstance,
    methods: Sequence[MethodSpec],
    params: MilpParams = MilpParams(),
    history: HistoryBank = HistoryBank(),
    *,
    options: PipelineOptions = PipelineOptions(),
    seed: int = 0,
    sigma: float = 0.0,
    trial: int = 0,
) -> ComparisonResult:
    """Solve the unrestricted baseline, then every method through the restricted pipeline."""

    prob = build_uc_milp(inst)
    base_solution, base_stats = solve_milp(prob, params)
    baseline = _baseline_record(inst, prob, base_solution, base_stats, sigma, trial)
    records = [baseline]
    for spec in methods:
        if spec.name == BASELINE:
            continue
        try:
            generator = spec.build(util.derive_seed(seed, "method", spec.name, trial))
            started = time.perf_counter()
            mask = generator.generate(inst, history, baseline=baseline.schedule)
            maskgen_time = time.perf_counter() - started
            result = restricted_pipeline(inst, mask, params, options, generator=generator, prob=prob)
            var_red, con_red = reduction_metrics(prob, result.mask)
            schedule = None
            if result.solution is not None:
                schedule = schedule_from_solution(inst, prob, result.solution.values)
            records.append(
                RunRecord(
                    instance_id=inst.name,
                    method=spec.name,
                    status=result.stats.status,
                    objective=result.stats.objective,
                    nodes=result.total_nodes,
                    simplex_iters=sum(s.simplex_iters for s in result.attempt_stats),
                    solve_time_s=result.solve_time,
                    maskgen_time_s=maskgen_time,
                    var_red_pct=var_red,
                    con_red_pct=con_red,
                    cost_err_pct=_cost_error(result.stats.objective, base_stats.objective),
                    mask_provenance=result.mask.provenance,
                    screen_accepted=result.screen.accepted,
                    violations=_violation_count(inst, prob, result.solution),
                    sigma=sigma,
                    trial=trial,
                    schedule=schedule,
                    initial_status=_initial_status(inst),
                )
            )
        except Exception:
            LOGGER.exception("Method %s failed on %s (trial %s)", spec.name, inst.name, trial)
            records.append(_error_record(inst, spec.name, sigma, trial))
    LOGGER.info("Compared %s methods on %s", len(records) - 1, inst.name)
    return ComparisonResult(aggregate(records), tuple(records), baseline.schedule)


def _run_ordered(tasks: Sequence[Callable[[], T]], jobs: int) -> List[T]:
    if jobs <= 1 or len(tasks) <= 1:
        return [task() for task in tasks]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(task) for task in tasks]
        return [future.result() for future in futures]


@dataclass(frozen=True)
class SigmaAggregate:
    sigma: float
    trials: int
    table: ComparisonTable


@dataclass(frozen=True, eq=False)
class SweepResult:
    rows: Tuple[SigmaAggregate, ...]
    records: Tuple[RunRecord, ...]


def noise_sweep(
    inst: UcInstance,
    sigmas: Sequence[float],
    trials_per_sigma: int,
    seed: int,
    methods: Sequence[MethodSpec],
    params: MilpParams = MilpParams(),
    history: HistoryBank = HistoryBank(),
    *,
    options: PipelineOptions = PipelineOptions(),
    jobs: int = 1,
) -> SweepResult:
    """Perturb demand per trial and compare methods; one aggregate per noise level."""

    if trials_per_sigma < 1:
        raise ValueError(f"trials_per_sigma must be >= 1, got {trials_per_sigma}")

    def task(sigma: float, trial: int) -> Callable[[], ComparisonResult]:
        def run() -> ComparisonResult:
            perturbed = perturb_demand(inst, sigma, util.derive_seed(seed, "sweep", sigma, trial))
            return run_comparison(
                perturbed, methods, params, history, options=options, seed=seed, sigma=sigma, trial=trial
            )

        return run

    tasks = [task(float(sigma), trial) for sigma in sigmas for trial in range(trials_per_sigma)]
    results = _run_ordered(tasks, jobs)
    rows = []
    records: List[RunRecord] = []
    for index, sigma in enumerate(sigmas):
        chunk = results[index * trials_per_sigma : (index + 1) * trials_per_sigma]
        sigma_records = [record for result in chunk for record in result.records]
        records.extend(sigma_records)
        rows.append(SigmaAggregate(float(sigma), trials_per_sigma, aggregate(sigma_records)))
        LOGGER.info("Noise level %s done (%s trials)", sigma, trials_per_sigma)
    return SweepResult(tuple(rows), tuple(records))


def carried_state(inst: UcInstance, schedule: DailySchedule) -> Dict[str, Tuple[int, float, int]]:
    """Next-day initial state from a solved day: final status, output and terminal run length."""

    states = {}
    for i, gen in enumerate(inst.generators):
        u = schedule.u[i]
        last = int(u[-1])
        run = 0
        for value in u[::-1]:
            if int(value) != last:
                break
            run += 1
        if run == len(u) and gen.u0 == last:
            run += gen.init_duration
        run = max(1, min(run, max(gen.ut, gen.dt)))
        p0 = float(np.clip(schedule.p[i, -1], gen.p_min, gen.p_max)) if last else 0.0
        states[gen.id] = (last, p0, run)
    return states


def long_horizon(
    inst: UcInstance,
    daily_demands: Sequence[np.ndarray],
    method: MethodSpec,
    params: MilpParams = MilpParams(),
    history: HistoryBank = HistoryBank(),
    *,
    carry_state: bool = False,
    options: PipelineOptions = PipelineOptions(),
    seed: int = 0,
    jobs: int = 1,
) -> List[RunRecord]:
    """Solve consecutive days (baseline and ``method`` each day), growing the history bank.

    With ``carry_state`` each day starts from the previous day's operated
    schedule (the method's, or the baseline's when the method failed).
    """

    shapes = {np.asarray(d).shape for d in daily_demands}
    if shapes and shapes != {inst.demand.shape}:
        raise ValueError(f"daily demand shapes {sorted(shapes)} do not match {inst.demand.shape}")

    if not carry_state and not method.needs_history and method.name != "llm":
        def task(day: int, demand: np.ndarray) -> Callable[[], ComparisonResult]:
            return lambda: run_comparison(
                inst.with_demand(demand), [method], params, history, options=options, seed=seed, trial=day
            )

        results = _run_ordered([task(day, np.asarray(d)) for day, d in enumerate(daily_demands)], jobs)
        return [record for result in results for record in result.records]

    records: List[RunRecord] = []
    bank = history
    current = inst
    for day, demand in enumerate(daily_demands):
        day_inst = current.with_demand(np.asarray(demand, dtype=float))
        result = run_comparison(day_inst, [method], params, bank, options=options, seed=seed, trial=day)
        records.extend(result.records)
        base, restricted = result.records[0], result.records[-1]
        if base.schedule is not None:
            bank = bank.appended(HistoryDay(day_inst.total_demand(), base.schedule))
        operated = restricted.schedule if restricted.schedule is not None else base.schedule
        if carry_state:
            if operated is None:
                LOGGER.warning("Day %s has no schedule; next day keeps the previous initial state", day)
            else:
                current = day_inst.with_initial_state(carried_state(day_inst, operated))
        LOGGER.info("Day %s: baseline %s, %s %s", day, base.status, method.name, restricted.status)
    return records


def build_history(
    inst: UcInstance, days: int, sigma_rel: float, seed: int, params: MilpParams = MilpParams()
) -> HistoryBank:
    """Synthesise past days by perturbing demand and solving each unrestricted."""

    found = []
    for day in range(days):
        perturbed = perturb_demand(inst, sigma_rel, util.derive_seed(seed, "history", day))
        prob = build_uc_milp(perturbed)
        solution, stats = solve_milp(prob, params)
        if solution is None:
            LOGGER.warning("History day %s has no solution (%s); skipped", day, stats.status)
            continue
        found.append(HistoryDay(perturbed.total_demand(), schedule_from_solution(perturbed, prob, solution.values)))
    LOGGER.info("Built history bank with %s of %s days", len(found), days)
    return HistoryBank(tuple(found))


def scaling_study(
    inst: UcInstance,
    extra_units: Sequence[int],
    methods: Sequence[MethodSpec],
    params: MilpParams = MilpParams(),
    *,
    history_days: int = 0,
    history_sigma: float = 0.05,
    options: PipelineOptions = PipelineOptions(),
    seed: int = 0,
) -> List[ComparisonResult]:
    """Run the comparison on augmented copies of ``inst`` with more units."""

    results = []
    for extra in extra_units:
        variant = augment_instance(inst, int(extra), util.derive_seed(seed, "augment", int(extra)))
        bank = build_history(variant, history_days, history_sigma, seed, params) if history_days else HistoryBank()
        results.append(run_comparison(variant, methods, params, bank, options=options, seed=seed))
    return results


def redact_timings(records: Iterable[RunRecord]) -> List[RunRecord]:
    return [replace(record, solve_time_s=0.0, maskgen_time_s=0.0) for record in records]


def write_records_csv(path: Path, records: Iterable[RunRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for record in records:
            writer.writerow(record.to_row())


def read_records_csv(path: Path) -> List[RunRecord]:
    with Path(path).open(encoding="utf-8", newline="") as handle:
        return [RunRecord.from_row(row) for row in csv.DictReader(handle)]


def write_json(path: Path, payload: object) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
