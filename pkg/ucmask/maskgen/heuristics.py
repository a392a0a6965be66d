"""History-driven and random freeze-mask policies."""
from __future__ import annotations

import logging
import math
from collections import Counter
from typing import List, Optional, Tuple

import numpy as np
from sklearn.cluster import KMeans

from ..instance import DailySchedule, HistoryBank, HistoryError, UcInstance
from ..mask import FreezeMask, MaskEntry
from .base import DroppingReviser, MaskGenerator, consensus_mask, nearest_days

LOGGER = logging.getLogger(__name__)


def _require_history(history: HistoryBank, needed: int, what: str) -> None:
    if len(history) == 0:
        raise HistoryError(f"{what} needs a history bank; none was given", field="history")
    if len(history) < needed:
        raise HistoryError(
            f"{what} needs at least {needed} history days, got {len(history)}", field="history"
        )


def stability_mask(inst: UcInstance, history: HistoryBank, H: int, k_cap: int) -> FreezeMask:
    """Freeze statuses that agree across the ``H`` most load-similar history days."""

    if H < 1:
        raise ValueError(f"H must be >= 1, got {H}")
    _require_history(history, 1, "stability masking")
    picked = nearest_days(inst, history, min(H, len(history)))
    return consensus_mask(inst, tuple(history.days[i].schedule for i in picked), k_cap, "stability")


def knn_mask(inst: UcInstance, history: HistoryBank, k_neighbors: int, k_cap: int) -> FreezeMask:
    if k_neighbors < 1:
        raise ValueError(f"k_neighbors must be >= 1, got {k_neighbors}")
    _require_history(history, k_neighbors, "knn masking")
    picked = nearest_days(inst, history, k_neighbors)
    return consensus_mask(inst, tuple(history.days[i].schedule for i in picked), k_cap, "knn")


def default_clusters(history_size: int) -> int:
    return max(1, int(math.ceil(math.sqrt(history_size))))


def kmeans_mask(
    inst: UcInstance, history: HistoryBank, n_clusters: Optional[int], k_cap: int, seed: int
) -> FreezeMask:
    """Cluster history days on total load, then freeze the consensus of the target's cluster."""

    _require_history(history, 1, "k-means masking")
    history.check_against(inst)
    n_clusters = default_clusters(len(history)) if n_clusters is None else n_clusters
    if n_clusters < 1:
        raise ValueError(f"n_clusters must be >= 1, got {n_clusters}")
    _require_history(history, n_clusters, "k-means masking")
    model = KMeans(
        n_clusters=n_clusters,
        init="k-means++",
        n_init=1,
        max_iter=100,
        tol=0.0,
        algorithm="lloyd",
        random_state=seed,
    )
    labels = model.fit_predict(history.profiles())
    target = int(model.predict(inst.total_demand().reshape(1, -1))[0])
    members = tuple(history.days[i].schedule for i in np.flatnonzero(labels == target))
    LOGGER.debug("Target day joins cluster %s with %s members", target, len(members))
    return consensus_mask(inst, members, k_cap, "kmeans")


def _sample_positions(G: int, T: int, ratio: float, rng: np.random.Generator) -> Tuple[List[Tuple[int, int]], int]:
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must lie in [0, 1], got {ratio}")
    count = int(math.floor(round(ratio * G * T, 9)))
    cap = int(math.ceil(round(ratio * G, 9)))
    per_hour: Counter = Counter()
    picked: List[Tuple[int, int]] = []
    for index in rng.permutation(G * T):
        if len(picked) >= count:
            break
        g, t = divmod(int(index), T)
        if per_hour[t] < cap:
            per_hour[t] += 1
            picked.append((g, t))
    return picked, cap


def random_mask(inst: UcInstance, ratio: float, seed: int) -> FreezeMask:
    """Freeze ``floor(ratio*G*T)`` uniformly chosen unit-hours to uniformly drawn states."""

    rng = np.random.default_rng(seed)
    picked, cap = _sample_positions(len(inst.generators), inst.horizon, ratio, rng)
    states = rng.integers(0, 2, size=len(picked))
    entries = tuple(
        MaskEntry(t + 1, inst.generators[g].id, int(u)) for (g, t), u in zip(picked, states)
    )
    return FreezeMask(entries, cap, "random")


def optimum_mask(inst: UcInstance, baseline: DailySchedule, ratio: float, seed: int) -> FreezeMask:
    """Diagnostic mask: the random positions, frozen at the unrestricted optimum's statuses."""

    if baseline.shape != (len(inst.generators), inst.horizon):
        raise ValueError(f"baseline shape {baseline.shape} does not match the instance")
    rng = np.random.default_rng(seed)
    picked, cap = _sample_positions(len(inst.generators), inst.horizon, ratio, rng)
    entries = tuple(MaskEntry(t + 1, inst.generators[g].id, int(baseline.u[g, t])) for g, t in picked)
    return FreezeMask(entries, cap, "fix-at-optimum")


class StabilityMaskGenerator(DroppingReviser, MaskGenerator):
    name = "stability"

    def __init__(self, H: int = 3, k_cap: Optional[int] = None) -> None:
        super().__init__(k_cap)
        self.H = H

    def generate(self, inst, history, *, baseline=None) -> FreezeMask:
        return stability_mask(inst, history, self.H, self.cap_for(inst))


class KnnMaskGenerator(DroppingReviser, MaskGenerator):
    name = "knn"

    def __init__(self, k_neighbors: int = 5, k_cap: Optional[int] = None) -> None:
        super().__init__(k_cap)
        self.k_neighbors = k_neighbors

    def generate(self, inst, history, *, baseline=None) -> FreezeMask:
        return knn_mask(inst, history, self.k_neighbors, self.cap_for(inst))


class KMeansMaskGenerator(DroppingReviser, MaskGenerator):
    name = "kmeans"

    def __init__(self, n_clusters: Optional[int] = None, k_cap: Optional[int] = None, seed: int = 0) -> None:
        super().__init__(k_cap)
        self.n_clusters = n_clusters
        self.seed = seed

    def generate(self, inst, history, *, baseline=None) -> FreezeMask:
        return kmeans_mask(inst, history, self.n_clusters, self.cap_for(inst), self.seed)


class RandomMaskGenerator(DroppingReviser, MaskGenerator):
    name = "random"

    def __init__(self, ratio: float = 0.1, seed: int = 0) -> None:
        super().__init__(None)
        self.ratio = ratio
        self.seed = seed

    def generate(self, inst, history, *, baseline=None) -> FreezeMask:
        return random_mask(inst, self.ratio, self.seed)


class OptimumMaskGenerator(MaskGenerator):
    name = "fix-at-optimum"

    def __init__(self, ratio: float = 0.1, seed: int = 0) -> None:
        super().__init__(None)
        self.ratio = ratio
        self.seed = seed

    def generate(self, inst, history, *, baseline=None) -> FreezeMask:
        if baseline is None:
            raise ValueError("fix-at-optimum needs the unrestricted optimal schedule")
        return optimum_mask(inst, baseline, self.ratio, self.seed)
