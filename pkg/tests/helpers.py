"""Shared fixtures: seeded random instances and an exhaustive reference optimum."""
from __future__ import annotations

import itertools
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linprog

from ucmask.instance import BASE_MVA, Generator, Line, UcInstance, load_instance

DATA_DIR = Path(__file__).resolve().parents[1] / "data"


def canned(name: str) -> UcInstance:
    return load_instance(DATA_DIR / f"{name}.json")


def _horizon_for(rng: np.random.Generator, n_gens: int) -> int:
    if n_gens == 2:
        return int(rng.integers(4, 9))
    if n_gens == 3:
        return int(rng.integers(4, 6))
    return 4


def random_instance(
    seed: int,
    n_gens: Optional[int] = None,
    horizon: Optional[int] = None,
    n_buses: Optional[int] = None,
) -> UcInstance:
    """Small instance (2-4 units, 1-3 buses on a tree) sized for exhaustive enumeration."""

    rng = np.random.default_rng(seed)
    G = n_gens if n_gens is not None else int(rng.integers(2, 5))
    T = horizon if horizon is not None else _horizon_for(rng, G)
    N = n_buses if n_buses is not None else int(rng.integers(1, 4))
    buses = tuple(f"b{n + 1}" for n in range(N))
    generators = []
    for i in range(G):
        p_min = float(rng.uniform(5, 20))
        p_max = p_min + float(rng.uniform(20, 60))
        u0 = int(rng.integers(0, 2))
        generators.append(
            Generator(
                id=f"g{i + 1}",
                bus=buses[int(rng.integers(0, N))],
                c=float(rng.uniform(5, 30)),
                c_nl=float(rng.uniform(0, 50)),
                c_su=float(rng.uniform(0, 100)),
                p_min=p_min,
                p_max=p_max,
                ut=int(rng.integers(1, 4)),
                dt=int(rng.integers(1, 4)),
                r_hr=float(rng.uniform(0.3, 1.0)) * p_max,
                r_su=max(p_min, float(rng.uniform(0.3, 1.0)) * p_max),
                r_sd=max(p_min, float(rng.uniform(0.3, 1.0)) * p_max),
                u0=u0,
                p0=float(rng.uniform(p_min, p_max)) if u0 else 0.0,
                init_duration=int(rng.integers(1, 5)),
            )
        )
    lines = tuple(
        Line(
            id=f"l{n}",
            from_bus=buses[int(rng.integers(0, n))],
            to_bus=buses[n],
            b=float(rng.uniform(5, 20)),
            f_max=float(rng.uniform(50, 200)),
        )
        for n in range(1, N)
    )
    capacity = sum(gen.p_max for gen in generators)
    totals = rng.uniform(0.3, 0.7, size=T) * capacity
    shares = rng.dirichlet(np.ones(N), size=T).T
    demand = np.round(shares * totals, 3)
    return UcInstance(
        buses=buses,
        ref_bus=buses[0],
        generators=tuple(generators),
        lines=lines,
        horizon=T,
        demand=demand,
        name=f"random-{seed}",
    )


def _transitions(u0: int, row: Sequence[int]) -> Tuple[List[int], List[int]]:
    prev = [u0] + list(row[:-1])
    starts = [max(0, b - a) for a, b in zip(prev, row)]
    stops = [max(0, a - b) for a, b in zip(prev, row)]
    return starts, stops


def _admissible(gen: Generator, row: Sequence[int]) -> bool:
    T = len(row)
    starts, stops = _transitions(gen.u0, row)
    for t in range(T):
        if starts[t] and any(row[s] == 0 for s in range(t, min(T, t + gen.ut))):
            return False
        if stops[t] and any(row[s] == 1 for s in range(t, min(T, t + gen.dt))):
            return False
    forced = max(0, (gen.ut if gen.u0 else gen.dt) - gen.init_duration)
    return all(row[s] == gen.u0 for s in range(min(T, forced)))


def _merit_cost(gens: Sequence[Generator], demand: float) -> float:
    """Cheapest copper-plate dispatch of ``gens`` ignoring ramps; inf if infeasible."""

    low = sum(g.p_min for g in gens)
    high = sum(g.p_max for g in gens)
    if demand < low - 1e-7 or demand > high + 1e-7:
        return float("inf")
    cost = sum(g.c * g.p_min for g in gens)
    rest = demand - low
    for gen in sorted(gens, key=lambda g: g.c):
        take = min(rest, gen.p_max - gen.p_min)
        cost += gen.c * take
        rest -= take
    return cost


def _dispatch(inst: UcInstance, pattern: np.ndarray) -> Optional[float]:
    """Optimal variable cost of a fixed commitment pattern, or None when infeasible."""

    G, T, N, L = len(inst.generators), inst.horizon, len(inst.buses), len(inst.lines)
    n_p, n_f = G * T, L * T
    size = n_p + n_f + N * T
    pi = lambda i, t: i * T + t  # noqa: E731
    fi = lambda l, t: n_p + l * T + t  # noqa: E731
    ti = lambda n, t: n_p + n_f + n * T + t  # noqa: E731

    cost = np.zeros(size)
    bounds: List[Tuple[Optional[float], Optional[float]]] = [(None, None)] * size
    a_ub: List[np.ndarray] = []
    b_ub: List[float] = []
    a_eq: List[np.ndarray] = []
    b_eq: List[float] = []
    for i, gen in enumerate(inst.generators):
        starts, stops = _transitions(gen.u0, pattern[i])
        for t in range(T):
            u = pattern[i, t]
            u_prev = gen.u0 if t == 0 else pattern[i, t - 1]
            cost[pi(i, t)] = gen.c
            bounds[pi(i, t)] = (gen.p_min * u, gen.p_max * u)
            up = np.zeros(size)
            down = np.zeros(size)
            up[pi(i, t)] = 1.0
            down[pi(i, t)] = -1.0
            if t == 0:
                b_ub.append(gen.p0 + gen.r_hr * u_prev + gen.r_su * starts[t])
                b_ub.append(-gen.p0 + gen.r_hr * u + gen.r_sd * stops[t])
            else:
                up[pi(i, t - 1)] = -1.0
                down[pi(i, t - 1)] = 1.0
                b_ub.append(gen.r_hr * u_prev + gen.r_su * starts[t])
                b_ub.append(gen.r_hr * u + gen.r_sd * stops[t])
            a_ub.extend([up, down])
    for l, line in enumerate(inst.lines):
        for t in range(T):
            bounds[fi(l, t)] = (-line.f_max, line.f_max)
    for n, bus in enumerate(inst.buses):
        for t in range(T):
            if bus == inst.ref_bus:
                bounds[ti(n, t)] = (0.0, 0.0)
            row = np.zeros(size)
            for i, gen in enumerate(inst.generators):
                if gen.bus == bus:
                    row[pi(i, t)] = 1.0
            for l, line in enumerate(inst.lines):
                if line.from_bus == bus:
                    row[fi(l, t)] -= 1.0
                if line.to_bus == bus:
                    row[fi(l, t)] += 1.0
            a_eq.append(row)
            b_eq.append(float(inst.demand[n, t]))
    for l, line in enumerate(inst.lines):
        frm, to = inst.bus_index(line.from_bus), inst.bus_index(line.to_bus)
        for t in range(T):
            row = np.zeros(size)
            row[fi(l, t)] = 1.0
            row[ti(frm, t)] -= BASE_MVA * line.b
            row[ti(to, t)] += BASE_MVA * line.b
            a_eq.append(row)
            b_eq.append(0.0)

    result = linprog(
        cost,
        A_ub=np.array(a_ub) if a_ub else None,
        b_ub=np.array(b_ub) if b_ub else None,
        A_eq=np.array(a_eq),
        b_eq=np.array(b_eq),
        bounds=bounds,
        method="highs",
    )
    return float(result.fun) if result.status == 0 else None


def brute_force_optimum(inst: UcInstance) -> Optional[float]:
    """Enumerate admissible commitment patterns cheapest-bound first, dispatching each by LP."""

    G, T = len(inst.generators), inst.horizon
    per_unit: List[List[Tuple[Tuple[int, ...], float]]] = []
    for gen in inst.generators:
        rows = []
        for row in itertools.product((0, 1), repeat=T):
            if _admissible(gen, row):
                starts, _ = _transitions(gen.u0, row)
                rows.append((row, gen.c_nl * sum(row) + gen.c_su * sum(starts)))
        per_unit.append(rows)

    totals = inst.demand.sum(axis=0)
    hourly: Dict[Tuple[int, Tuple[int, ...]], float] = {}
    for t in range(T):
        for subset in itertools.product((0, 1), repeat=G):
            gens = [gen for gen, on in zip(inst.generators, subset) if on]
            hourly[(t, subset)] = _merit_cost(gens, float(totals[t]))

    candidates = []
    for combo in itertools.product(*per_unit):
        bound = sum(fixed for _, fixed in combo)
        for t in range(T):
            bound += hourly[(t, tuple(row[t] for row, _ in combo))]
            if bound == float("inf"):
                break
        if bound < float("inf"):
            candidates.append((bound, tuple(row for row, _ in combo)))
    candidates.sort(key=lambda item: item[0])

    best: Optional[float] = None
    for bound, rows in candidates:
        if best is not None and bound >= best - 1e-9 * max(1.0, abs(best)):
            break
        pattern = np.array(rows, dtype=int).reshape(G, T)
        variable = _dispatch(inst, pattern)
        if variable is None:
            continue
        fixed = sum(
            gen.c_nl * sum(pattern[i]) + gen.c_su * sum(_transitions(gen.u0, pattern[i])[0])
            for i, gen in enumerate(inst.generators)
        )
        total = variable + fixed
        if best is None or total < best:
            best = total
    return best
