"""Freeze masks: sparse (hour, generator, state) fixings with a per-hour cap."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterable, Iterator, Optional, Tuple

from .instance import UcInstance


class MaskError(RuntimeError):
    """Raised when a freeze mask breaks its invariants."""


@dataclass(frozen=True, order=True)
class MaskEntry:
    t: int
    g: str
    u: int


def default_k_cap(num_generators: int) -> int:
    return int(math.ceil(0.1 * num_generators))


@dataclass(frozen=True)
class FreezeMask:
    entries: Tuple[MaskEntry, ...] = ()
    k_cap: int = 0
    provenance: str = "empty"

    def __post_init__(self) -> None:
        entries = tuple(sorted(MaskEntry(int(e.t), str(e.g), int(e.u)) for e in self.entries))
        if self.k_cap < 0:
            raise MaskError(f"k_cap must be >= 0, got {self.k_cap}")
        seen = set()
        for entry in entries:
            if entry.t < 1:
                raise MaskError(f"hour {entry.t} in [{entry.t}, {entry.g!r}, {entry.u}] must be >= 1")
            if entry.u not in (0, 1):
                raise MaskError(f"state {entry.u} for ({entry.t}, {entry.g}) must be 0 or 1")
            if (entry.t, entry.g) in seen:
                raise MaskError(f"duplicate fixing for hour {entry.t}, generator {entry.g!r}")
            seen.add((entry.t, entry.g))
        for hour, count in Counter(entry.t for entry in entries).items():
            if count > self.k_cap:
                raise MaskError(f"hour {hour} fixes {count} units, above the cap K={self.k_cap}")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def empty(cls, k_cap: int = 0, provenance: str = "empty") -> "FreezeMask":
        return cls((), k_cap, provenance)

    @classmethod
    def from_tuples(cls, tuples: Iterable[Tuple[int, str, int]], k_cap: int, provenance: str = "manual") -> "FreezeMask":
        return cls(tuple(MaskEntry(t, g, u) for t, g, u in tuples), k_cap, provenance)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[MaskEntry]:
        return iter(self.entries)

    def as_dict(self) -> Dict[Tuple[int, str], int]:
        return {(entry.t, entry.g): entry.u for entry in self.entries}

    def hours(self) -> Counter:
        return Counter(entry.t for entry in self.entries)

    def without(self, pairs: Iterable[Tuple[int, str]], provenance: Optional[str] = None) -> "FreezeMask":
        drop = set(pairs)
        kept = tuple(entry for entry in self.entries if (entry.t, entry.g) not in drop)
        return FreezeMask(kept, self.k_cap, provenance or self.provenance)

    def with_provenance(self, provenance: str) -> "FreezeMask":
        return FreezeMask(self.entries, self.k_cap, provenance)

    def check_against(self, inst: UcInstance) -> None:
        """Raise ``MaskError`` unless every entry addresses a real unit-hour of ``inst``."""

        known = set(inst.generator_ids)
        for entry in self.entries:
            if entry.g not in known:
                raise MaskError(f"tuple [{entry.t}, {entry.g!r}, {entry.u}] names an unknown generator")
            if entry.t > inst.horizon:
                raise MaskError(f"tuple [{entry.t}, {entry.g!r}, {entry.u}] is outside hours 1..{inst.horizon}")

    def to_json(self) -> str:
        return json.dumps([[entry.t, entry.g, entry.u] for entry in self.entries])
