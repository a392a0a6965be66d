"""Prompt rendering and strict parsing of the ``[t, g, u]`` tuple protocol."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Optional

from ..instance import HistoryBank, UcInstance
from ..mask import FreezeMask, MaskEntry
from .base import nearest_days


class ResponseError(RuntimeError):
    """Base class for rejected model replies."""


class ResponseParseError(ResponseError):
    """The reply is not a bare JSON document."""


class ResponseSchemaError(ResponseError):
    """The reply is JSON but not an array of ``[int, str, int]`` triples."""


class ResponseSemanticError(ResponseError):
    """The triples are well-typed but address unknown units, bad hours/states, duplicates or exceed K."""


GUIDELINES = (
    "At each hour t, fix at most {k} units to avoid excessive feasible-region reduction.",
    "Favor commitment patterns consistent with minimum up/down requirements and initial conditions.",
    "When uncertain, restrict fewer units and allow the solver to determine the remaining commitments.",
)


@dataclass(frozen=True)
class PromptDocument:
    task: str
    input_data: str
    output_format: str
    guidelines: str
    reference_days: int = 0

    @property
    def text(self) -> str:
        return "\n\n".join(
            [
                f"## Task\n{self.task}",
                f"## Input Data\n{self.input_data}",
                f"## Output Format\n{self.output_format}",
                f"## Restriction Guidelines\n{self.guidelines}",
            ]
        )

    def messages(self) -> List[Dict[str, str]]:
        return [{"role": "user", "content": self.text}]


def _generator_table(inst: UcInstance) -> Dict[str, Dict[str, float]]:
    return {
        gen.id: {
            "p_min": gen.p_min,
            "p_max": gen.p_max,
            "min_up": gen.ut,
            "min_down": gen.dt,
            "initial_status": gen.u0,
        }
        for gen in inst.generators
    }


def _profile(values) -> List[float]:
    return [round(float(v), 3) for v in values]


def build_llm_prompt(inst: UcInstance, history: HistoryBank, H: int, k_cap: int) -> PromptDocument:
    """Render the four prompt sections; network, ramping and reserve data are never included."""

    T = inst.horizon
    task = (
        f"Identify a sparse set of unit-hour commitment variables to fix in a {T}-hour UC problem. "
        "Do not generate a complete schedule. Only specify selected commitment decisions; "
        "all remaining decisions are determined by the MILP solver."
    )
    parts = [
        "Generator characteristics (JSON object):",
        json.dumps(_generator_table(inst), sort_keys=True),
        f"Hourly demand profile for the target day (MW, hours 1..{T}):",
        json.dumps(_profile(inst.total_demand())),
    ]
    shown = 0
    if len(history) and H > 0:
        picked = nearest_days(inst, history, min(H, len(history)))
        shown = len(picked)
        parts.append(f"Reference days ({shown} most load-similar past days with their MILP commitment schedules):")
        for rank, index in enumerate(picked, start=1):
            day = history.days[index]
            schedule = {gen.id: day.schedule.u[i].astype(int).tolist() for i, gen in enumerate(inst.generators)}
            parts.append(f"Day {rank} demand: {json.dumps(_profile(day.profile))}")
            parts.append(f"Day {rank} commitment: {json.dumps(schedule, sort_keys=True)}")
    example = inst.generators[0].id if inst.generators else "g1"
    output_format = (
        "Return a structured list of tuples (t,g,u) indicating that unit g is fixed to commitment "
        "state u in {0,1} at hour t. Use a strict JSON array of [t, g, u] triples with 1-based "
        f'integer hours up to {T} and generator ids as strings, for example [[1, "{example}", 1]]. '
        "No explanatory text should be included."
    )
    guidelines = "\n".join(
        f"{number}. {line.format(k=k_cap)}" for number, line in enumerate(GUIDELINES, start=1)
    )
    return PromptDocument(task, "\n".join(parts), output_format, guidelines, shown)


def _reject_constant(token: str):
    raise ResponseParseError(f"non-finite number {token} in reply")


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def parse_llm_response(
    text: str, inst: UcInstance, k_cap: int, provenance: str = "llm"
) -> FreezeMask:
    """Accept only a bare JSON array of ``[t, g, u]`` triples valid for ``inst`` under ``k_cap``."""

    try:
        payload = json.loads(text.strip(), parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise ResponseParseError(f"reply is not a bare JSON document: {exc.msg} at column {exc.colno}") from exc
    if not isinstance(payload, list):
        raise ResponseSchemaError(f"expected a JSON array, got {type(payload).__name__}")
    triples = []
    for position, item in enumerate(payload):
        if not isinstance(item, list) or len(item) != 3:
            raise ResponseSchemaError(f"element {position} must be a [t, g, u] triple, got {item!r}")
        t, g, u = item
        if not _is_int(t) or not isinstance(g, str) or not _is_int(u):
            raise ResponseSchemaError(f"element {position} must be [int, str, int], got {item!r}")
        triples.append((t, g, u))

    known = set(inst.generator_ids)
    seen = set()
    for t, g, u in triples:
        if g not in known:
            raise ResponseSemanticError(f"unknown generator {g!r} in [{t}, {g!r}, {u}]")
        if not 1 <= t <= inst.horizon:
            raise ResponseSemanticError(f"hour {t} outside 1..{inst.horizon} in [{t}, {g!r}, {u}]")
        if u not in (0, 1):
            raise ResponseSemanticError(f"state {u} is not 0 or 1 in [{t}, {g!r}, {u}]")
        if (t, g) in seen:
            raise ResponseSemanticError(f"duplicate fixing for hour {t}, generator {g!r}")
        seen.add((t, g))
    for hour, count in Counter(t for t, _, _ in triples).items():
        if count > k_cap:
            raise ResponseSemanticError(f"hour {hour} fixes {count} units, above the cap K={k_cap}")
    return FreezeMask(tuple(MaskEntry(t, g, u) for t, g, u in triples), k_cap, provenance)


def revision_request(feedback_text: str, k_cap: Optional[int] = None) -> str:
    cap = f" Fix at most {k_cap} units per hour." if k_cap is not None else ""
    return f"{feedback_text}\nReturn only the revised JSON array of [t, g, u] triples.{cap}"
