"""Mask generator interface and the feedback passed to revision hooks."""
from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..instance import DailySchedule, HistoryBank, UcInstance, load_distance
from ..mask import FreezeMask, MaskEntry, default_k_cap

LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class MaskFeedback:
    """Summary text of a failed screen or validation plus the unit-hours it implicates."""

    text: str
    implicated: Tuple[Tuple[int, str], ...] = ()


class MaskGenerator(ABC):
    name = "generator"

    def __init__(self, k_cap: Optional[int] = None) -> None:
        self.k_cap = k_cap

    def cap_for(self, inst: UcInstance) -> int:
        return default_k_cap(len(inst.generators)) if self.k_cap is None else int(self.k_cap)

    @abstractmethod
    def generate(
        self, inst: UcInstance, history: HistoryBank, *, baseline: Optional[DailySchedule] = None
    ) -> FreezeMask:
        ...

    def revise(self, inst: UcInstance, previous: FreezeMask, feedback: MaskFeedback) -> FreezeMask:
        """Return a replacement mask after a failed screen or validation.

        Generators without a repair strategy propose no restriction at all.
        """

        return FreezeMask.empty(previous.k_cap, provenance=f"{self.name}-revised")


class EmptyMaskGenerator(MaskGenerator):
    """The plain MILP: no restriction."""

    name = "milp"

    def generate(self, inst, history, *, baseline=None) -> FreezeMask:
        return FreezeMask.empty(self.cap_for(inst))


class DroppingReviser:
    """Mixin: revise by removing every entry the feedback names."""

    name = "generator"

    def revise(self, inst: UcInstance, previous: FreezeMask, feedback: MaskFeedback) -> FreezeMask:
        revised = previous.without(feedback.implicated, provenance=f"{self.name}-revised")
        LOGGER.info("Revised %s mask: %s -> %s entries", self.name, len(previous), len(revised))
        return revised


def nearest_days(inst: UcInstance, history: HistoryBank, count: int) -> np.ndarray:
    """Indices of the ``count`` history days closest in total load, nearest first (stable on ties)."""

    history.check_against(inst)
    target = inst.total_demand()
    distances = np.array([load_distance(target, day.profile) for day in history.days])
    return np.argsort(distances, kind="stable")[:count]


def consensus_mask(
    inst: UcInstance,
    schedules: Tuple[DailySchedule, ...],
    k_cap: int,
    provenance: str,
) -> FreezeMask:
    """Freeze unit-hours on which every schedule agrees, largest units first, ``k_cap`` per hour."""

    if not schedules or k_cap == 0:
        return FreezeMask.empty(k_cap, provenance=provenance)
    stacked = np.stack([schedule.u for schedule in schedules])
    unanimous = np.all(stacked == stacked[0], axis=0)
    order = sorted(range(len(inst.generators)), key=lambda i: (-inst.generators[i].p_max, inst.generators[i].id))
    entries = []
    for t in range(inst.horizon):
        picked = 0
        for i in order:
            if picked >= k_cap:
                break
            if unanimous[i, t]:
                entries.append(MaskEntry(t + 1, inst.generators[i].id, int(stacked[0, i, t])))
                picked += 1
    return FreezeMask(tuple(entries), k_cap, provenance)
