"""Command-line entry point: ``python -m ucmask <subcommand>``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from dotenv import load_dotenv

from . import harness, util
from .formulation import build_uc_milp, problem_counts, schedule_from_solution, write_lp
from .instance import (
    HistoryBank,
    HistoryError,
    InstanceSemanticError,
    InstanceSyntaxError,
    UcInstance,
    load_history,
    load_instance,
    perturb_demand,
    validate_instance,
)
from .mask import MaskError
from .maskgen import HISTORY_METHODS, METHODS
from .maskgen.llm import ConfigError, load_endpoint_config
from .restriction import PipelineOptions, reduction_metrics, restricted_pipeline
from .solver import (
    LIMIT_STATUSES,
    STATUS_GAP_LIMIT,
    STATUS_INFEASIBLE,
    STATUS_OPTIMAL,
    MilpParams,
    MilpSolution,
    SolveStats,
    solve_milp,
)

LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_VALIDATION = 3
EXIT_INFEASIBLE = 4
EXIT_LIMIT = 5
EXIT_INTERNAL = 10

SYNTHETIC_HISTORY_SIGMA = 0.05


@dataclass(frozen=True)
class CliConfig:
    """Resolved command line: paths are absolute and solver parameters validated."""

    subcommand: str
    instance: Path
    out: Path
    seed: int
    params: MilpParams
    methods: Tuple[harness.MethodSpec, ...] = ()
    options: PipelineOptions = PipelineOptions()
    history: Optional[Path] = None
    synthetic_history: int = 0
    jobs: int = 1
    redact_timings: bool = False
    extras: Dict[str, object] = field(default_factory=dict)


def _float_list(text: str) -> List[float]:
    try:
        values = [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc
    if not values:
        raise argparse.ArgumentTypeError("expected at least one value")
    return values


def _int_list(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _method(text: str) -> str:
    if text not in METHODS:
        raise argparse.ArgumentTypeError(f"unknown method {text!r}; choose from {', '.join(METHODS)}")
    return text


def _method_list(text: str) -> List[str]:
    return [_method(part.strip()) for part in text.split(",") if part.strip()]


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    common.add_argument("--instance", type=Path, required=True, help="instance JSON file")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
    common.add_argument("--seed", type=int, default=0, help="root seed for every random choice (default: 0)")
    common.add_argument("--gap", type=float, default=1e-4, help="relative optimality gap tolerance (default: 1e-4)")
    common.add_argument("--time-limit", type=float, default=None, help="wall-clock limit per MILP solve in seconds")
    common.add_argument("--node-limit", type=int, default=None, help="branch-and-bound node limit per MILP solve")
    common.add_argument("--jobs", type=int, default=1, help="parallel trials (default: 1)")
    common.add_argument("--log-level", default=None, help="logging level (default: $LOG_LEVEL or INFO)")
    common.add_argument(
        "--redact-timings", action="store_true", help="write timing columns as 0.0 for byte-identical artifacts"
    )
    return common


def _method_parser() -> argparse.ArgumentParser:
    methods = argparse.ArgumentParser(add_help=False, allow_abbrev=False)
    methods.add_argument("--history", type=Path, default=None, help="history bank JSON file")
    methods.add_argument(
        "--synthetic-history", type=int, default=0, metavar="N", help="synthesise N perturbed history days instead"
    )
    methods.add_argument("--H", dest="H", type=int, default=3, help="reference days for stability/llm (default: 3)")
    methods.add_argument("--K", dest="K", type=int, default=None, help="per-hour fixing cap (default: ceil(0.1 |G|))")
    methods.add_argument("--k-neighbors", type=int, default=5, help="neighbours for knn (default: 5)")
    methods.add_argument("--n-clusters", type=int, default=None, help="clusters for kmeans (default: ceil(sqrt(days)))")
    methods.add_argument("--ratio", type=float, default=0.1, help="freeze ratio for random/fix-at-optimum (default: 0.1)")
    methods.add_argument("--endpoint-config", type=Path, default=None, help="LLM endpoint config JSON (llm method)")
    methods.add_argument("--no-screen", action="store_true", help="skip pre-solve screening")
    methods.add_argument("--no-validate", action="store_true", help="skip post-solve validation")
    methods.add_argument("--max-retries", type=int, default=1, help="mask revisions before falling back (default: 1)")
    return methods


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ucmask", description="Commitment-restricted unit commitment experiments.", allow_abbrev=False
    )
    sub = parser.add_subparsers(dest="subcommand", required=True, metavar="SUBCOMMAND")
    common = _common_parser()
    method_flags = _method_parser()

    solve = sub.add_parser("solve", parents=[common], allow_abbrev=False, help="solve the unrestricted MILP")
    solve.add_argument("--write-lp", action="store_true", help="also write the model as CPLEX LP text")

    restrict = sub.add_parser(
        "restrict", parents=[common, method_flags], allow_abbrev=False, help="generate a mask and solve restricted"
    )
    restrict.add_argument("--method", type=_method, required=True, help=f"one of {', '.join(METHODS)}")

    compare = sub.add_parser(
        "compare", parents=[common, method_flags], allow_abbrev=False, help="compare methods against the baseline"
    )
    compare.add_argument("--methods", type=_method_list, required=True, help="comma-separated method names")
    compare.add_argument(
        "--augment", type=_int_list, default=None, help="comma-separated extra-unit counts for a scaling study"
    )

    sweep = sub.add_parser(
        "sweep", parents=[common, method_flags], allow_abbrev=False, help="compare methods under demand noise"
    )
    sweep.add_argument("--methods", type=_method_list, required=True, help="comma-separated method names")
    sweep.add_argument("--sigmas", type=_float_list, required=True, help="comma-separated relative noise levels")
    sweep.add_argument("--trials", type=int, default=5, help="trials per noise level (default: 5)")

    longhorizon = sub.add_parser(
        "longhorizon", parents=[common, method_flags], allow_abbrev=False, help="solve a sequence of days"
    )
    longhorizon.add_argument("--method", type=_method, required=True, help=f"one of {', '.join(METHODS)}")
    longhorizon.add_argument("--days", type=int, default=30, help="number of days (default: 30)")
    longhorizon.add_argument("--sigma", type=float, default=0.05, help="day-to-day demand noise (default: 0.05)")
    longhorizon.add_argument("--carry-state", action="store_true", help="start each day from the previous schedule")

    validate = sub.add_parser("validate", allow_abbrev=False, help="check an instance (and history) file")
    validate.add_argument("--instance", type=Path, required=True, help="instance JSON file")
    validate.add_argument("--history", type=Path, default=None, help="history bank JSON file")
    validate.add_argument("--log-level", default=None, help="logging level (default: $LOG_LEVEL or INFO)")
    return parser


def _method_names(args: argparse.Namespace) -> List[str]:
    if getattr(args, "methods", None) is not None:
        return list(args.methods)
    if getattr(args, "method", None) is not None:
        return [args.method]
    return []


def resolve_config(args: argparse.Namespace) -> CliConfig:
    """Turn parsed arguments into a CliConfig, raising ConfigError for bad combinations."""

    try:
        params = MilpParams(
            gap_tol=args.gap, time_limit=args.time_limit, node_limit=args.node_limit, seed=args.seed
        )
        options = PipelineOptions(
            screen=not getattr(args, "no_screen", False),
            validate=not getattr(args, "no_validate", False),
            max_retries=getattr(args, "max_retries", 1),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.jobs < 1:
        raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")

    names = _method_names(args)
    endpoint = load_endpoint_config(args.endpoint_config) if "llm" in names else None
    specs = tuple(
        harness.MethodSpec(
            name,
            H=args.H,
            k_cap=args.K,
            k_neighbors=args.k_neighbors,
            n_clusters=args.n_clusters,
            ratio=args.ratio,
            endpoint=endpoint,
        )
        for name in names
    )
    history = getattr(args, "history", None)
    extras = {
        key: getattr(args, key)
        for key in ("write_lp", "augment", "sigmas", "trials", "days", "sigma", "carry_state")
        if hasattr(args, key)
    }
    if extras.get("augment") and history is not None:
        raise ConfigError("--augment changes the unit count; use --synthetic-history instead of --history")
    return CliConfig(
        subcommand=args.subcommand,
        instance=args.instance.resolve(),
        out=args.out.resolve(),
        seed=args.seed,
        params=params,
        methods=specs,
        options=options,
        history=history.resolve() if history is not None else None,
        synthetic_history=getattr(args, "synthetic_history", 0),
        jobs=args.jobs,
        redact_timings=args.redact_timings,
        extras=extras,
    )


def _load_valid_instance(path: Path) -> UcInstance:
    inst = load_instance(path)
    violations = validate_instance(inst)
    for violation in violations:
        LOGGER.error("Instance %s: %s", inst.name, violation)
    if violations:
        first = violations[0]
        raise InstanceSemanticError(
            f"{len(violations)} validation failure(s), first: {first}", field=first.field, location=first.location
        )
    return inst


def _load_history(config: CliConfig, inst: UcInstance) -> HistoryBank:
    if config.history is not None:
        bank = load_history(config.history, inst)
    elif config.synthetic_history > 0:
        bank = harness.build_history(
            inst,
            config.synthetic_history,
            SYNTHETIC_HISTORY_SIGMA,
            util.derive_seed(config.seed, "history"),
            config.params,
        )
    else:
        bank = HistoryBank()
    needy = [spec.name for spec in config.methods if spec.name in HISTORY_METHODS]
    if needy and not len(bank):
        raise ConfigError(f"method {needy[0]} requires a history bank (--history or --synthetic-history)")
    return bank


def _status_exit(stats: SolveStats, solution: Optional[MilpSolution]) -> int:
    if stats.status in (STATUS_OPTIMAL, STATUS_GAP_LIMIT):
        return EXIT_OK
    if stats.status == STATUS_INFEASIBLE:
        return EXIT_INFEASIBLE
    if stats.status in LIMIT_STATUSES:
        note = "best incumbent written" if solution is not None else "no incumbent found"
        print(f"limit reached ({stats.status}); {note}", file=sys.stderr)
        return EXIT_LIMIT
    return EXIT_INTERNAL


def _stats_payload(stats: SolveStats, redact: bool) -> Dict[str, object]:
    payload = stats.to_dict()
    if redact:
        payload["wall_time"] = 0.0
    return payload


def _solution_payload(inst: UcInstance, prob, solution: Optional[MilpSolution], stats: SolveStats) -> Dict[str, object]:
    payload: Dict[str, object] = {"instance": inst.name, "status": stats.status, "objective": stats.objective}
    if solution is not None:
        schedule = schedule_from_solution(inst, prob, solution.values)
        payload["schedule"] = {
            gen.id: {"u": schedule.u[i].astype(int).tolist(), "p": [float(v) for v in schedule.p[i]]}
            for i, gen in enumerate(inst.generators)
        }
    return payload


def _summary(inst: UcInstance, label: str, stats: SolveStats) -> str:
    objective = "n/a" if stats.objective is None else f"{stats.objective:.6g}"
    return (
        f"{inst.name} [{label}]: {stats.status} objective={objective} "
        f"nodes={stats.nodes} iterations={stats.simplex_iters}"
    )


def cmd_solve(config: CliConfig) -> int:
    inst = _load_valid_instance(config.instance)
    prob = build_uc_milp(inst)
    binaries, continuous, rows = problem_counts(prob)
    LOGGER.info("Model %s: %s binaries, %s continuous, %s rows", inst.name, binaries, continuous, rows)
    if config.extras.get("write_lp"):
        config.out.mkdir(parents=True, exist_ok=True)
        (config.out / "problem.lp").write_text(write_lp(prob, inst.name), encoding="utf-8")
    solution, stats = solve_milp(prob, config.params)
    harness.write_json(config.out / "solution.json", _solution_payload(inst, prob, solution, stats))
    harness.write_json(config.out / "stats.json", _stats_payload(stats, config.redact_timings))
    print(_summary(inst, "milp", stats))
    return _status_exit(stats, solution)


def cmd_restrict(config: CliConfig) -> int:
    inst = _load_valid_instance(config.instance)
    history = _load_history(config, inst)
    spec = config.methods[0]
    prob = build_uc_milp(inst)
    baseline = None
    if spec.name == "fix-at-optimum":
        base_solution, base_stats = solve_milp(prob, config.params)
        if base_solution is None:
            raise ConfigError(f"fix-at-optimum needs a baseline solution; unrestricted solve ended {base_stats.status}")
        baseline = schedule_from_solution(inst, prob, base_solution.values)
    generator = spec.build(util.derive_seed(config.seed, "method", spec.name, 0))
    mask = generator.generate(inst, history, baseline=baseline)
    result = restricted_pipeline(inst, mask, config.params, config.options, generator=generator, prob=prob)
    var_red, con_red = reduction_metrics(prob, result.mask)

    config.out.mkdir(parents=True, exist_ok=True)
    (config.out / "mask.json").write_text(result.mask.to_json() + "\n", encoding="utf-8")
    harness.write_json(config.out / "solution.json", _solution_payload(inst, prob, result.solution, result.stats))
    stats = _stats_payload(result.stats, config.redact_timings)
    stats.update(
        {
            "method": spec.name,
            "mask_size": len(result.mask),
            "mask_provenance": result.mask.provenance,
            "screen_accepted": result.screen.accepted,
            "screen": result.screen.summary(),
            "violations": len(result.violations.violations),
            "attempts": result.attempts,
            "fell_back": result.fell_back,
            "var_red_pct": var_red,
            "con_red_pct": con_red,
        }
    )
    harness.write_json(config.out / "stats.json", stats)
    print(_summary(inst, spec.name, result.stats))
    return _status_exit(result.stats, result.solution)


def _emit_records(config: CliConfig, records: Sequence[harness.RunRecord]) -> List[harness.RunRecord]:
    records = harness.redact_timings(records) if config.redact_timings else list(records)
    harness.write_records_csv(config.out / "runs.csv", records)
    errors = sum(1 for record in records if record.status == harness.STATUS_ERROR)
    if errors:
        LOGGER.warning("%s runs ended in error; see the log above", errors)
    return records


def cmd_compare(config: CliConfig) -> int:
    inst = _load_valid_instance(config.instance)
    augment = config.extras.get("augment")
    if augment:
        if any(spec.needs_history for spec in config.methods) and not config.synthetic_history:
            raise ConfigError("history methods in a scaling study require --synthetic-history")
        results = harness.scaling_study(
            inst,
            augment,
            config.methods,
            config.params,
            history_days=config.synthetic_history,
            history_sigma=SYNTHETIC_HISTORY_SIGMA,
            options=config.options,
            seed=config.seed,
        )
        records = _emit_records(config, [r for result in results for r in result.records])
        variants = []
        for result in results:
            name = result.records[0].instance_id
            table = harness.aggregate([r for r in records if r.instance_id == name])
            variants.append({"instance": name, **table.to_dict()})
        summary = {"instances": variants}
    else:
        history = _load_history(config, inst)
        result = harness.run_comparison(
            inst, config.methods, config.params, history, options=config.options, seed=config.seed
        )
        records = _emit_records(config, result.records)
        summary = {"instance": inst.name, **harness.aggregate(records).to_dict()}
    harness.write_json(config.out / "summary.json", summary)
    print(f"{inst.name}: compared {len(config.methods)} methods, {len(records)} runs")
    return EXIT_OK


def cmd_sweep(config: CliConfig) -> int:
    inst = _load_valid_instance(config.instance)
    history = _load_history(config, inst)
    result = harness.noise_sweep(
        inst,
        config.extras["sigmas"],
        config.extras["trials"],
        config.seed,
        config.methods,
        config.params,
        history,
        options=config.options,
        jobs=config.jobs,
    )
    records = _emit_records(config, result.records)
    summary = {
        "instance": inst.name,
        "sigmas": [
            {
                "sigma": row.sigma,
                "trials": row.trials,
                **harness.aggregate([r for r in records if r.sigma == row.sigma]).to_dict(),
            }
            for row in result.rows
        ],
    }
    harness.write_json(config.out / "summary.json", summary)
    print(f"{inst.name}: swept {len(result.rows)} noise levels, {len(records)} runs")
    return EXIT_OK


def cmd_longhorizon(config: CliConfig) -> int:
    inst = _load_valid_instance(config.instance)
    history = _load_history(config, inst)
    days = int(config.extras["days"])
    if days < 1:
        raise ConfigError(f"--days must be >= 1, got {days}")
    sigma = float(config.extras["sigma"])
    demands = [perturb_demand(inst, sigma, util.derive_seed(config.seed, "day", day)).demand for day in range(days)]
    records = harness.long_horizon(
        inst,
        demands,
        config.methods[0],
        config.params,
        history,
        carry_state=bool(config.extras.get("carry_state")),
        options=config.options,
        seed=config.seed,
        jobs=config.jobs,
    )
    records = _emit_records(config, records)
    summary = {"instance": inst.name, "days": days, **harness.aggregate(records).to_dict()}
    harness.write_json(config.out / "summary.json", summary)
    print(f"{inst.name}: {days} days with {config.methods[0].name}, {len(records)} runs")
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    inst = load_instance(args.instance.resolve())
    violations = validate_instance(inst)
    if args.history is not None:
        bank = load_history(args.history.resolve(), inst)
        print(f"history: {len(bank)} days")
    for violation in violations:
        print(f"violation: {violation}")
    if violations:
        return EXIT_VALIDATION
    print(f"{inst.name}: valid ({len(inst.generators)} generators, {len(inst.buses)} buses, T={inst.horizon})")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[CliConfig], int]] = {
    "solve": cmd_solve,
    "restrict": cmd_restrict,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
    "longhorizon": cmd_longhorizon,
}


def _dispatch(args: argparse.Namespace) -> int:
    if args.subcommand == "validate":
        return cmd_validate(args)
    return COMMANDS[args.subcommand](resolve_config(args))


def main(argv: Optional[Sequence[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=(args.log_level or os.getenv("LOG_LEVEL", "INFO")).upper(), stream=sys.stderr)
    try:
        return _dispatch(args)
    except InstanceSyntaxError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"cannot read input: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (InstanceSemanticError, HistoryError, ConfigError, MaskError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception:
        LOGGER.exception("Unhandled failure in %s", args.subcommand)
        return EXIT_INTERNAL
