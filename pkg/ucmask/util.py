"""Utility helpers for experiment metrics and seed handling."""
from __future__ import annotations

import zlib
from typing import Union

import numpy as np


def relative_error(restricted_cost: float, baseline_cost: float) -> float:
    """Return the restricted objective's deviation from the baseline in percent."""

    if not baseline_cost > 0:
        raise ValueError(f"baseline cost must be positive, got {baseline_cost}")
    return 100.0 * (restricted_cost - baseline_cost) / baseline_cost


def time_reduction(baseline_s: float, restricted_s: float) -> float:
    """Return the solve-time saving relative to the baseline in percent."""

    if not baseline_s > 0:
        raise ValueError(f"baseline time must be positive, got {baseline_s}")
    return 100.0 * (1.0 - restricted_s / baseline_s)


def schedule_agreement(a, b) -> float:
    """Fraction of unit-hour cells where two commitment schedules agree.

    Accepts ``DailySchedule`` objects or raw ``u`` matrices.
    """

    left = np.asarray(getattr(a, "u", a))
    right = np.asarray(getattr(b, "u", b))
    if left.shape != right.shape:
        raise ValueError(f"schedule shapes differ: {left.shape} vs {right.shape}")
    if left.size == 0:
        return 1.0
    return float(np.count_nonzero(left == right)) / left.size


def _label_word(label: Union[int, str, float]) -> int:
    if isinstance(label, str):
        return zlib.crc32(label.encode("utf-8"))
    if isinstance(label, float):
        return zlib.crc32(repr(label).encode("utf-8"))
    return int(label) & 0xFFFFFFFF


def derive_seed(root: int, *labels: Union[int, str, float]) -> int:
    """Split ``root`` into an independent, reproducible 32-bit seed for ``labels``."""

    sequence = np.random.SeedSequence(int(root), spawn_key=tuple(_label_word(label) for label in labels))
    return int(sequence.generate_state(1)[0])
