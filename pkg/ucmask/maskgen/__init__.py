"""Freeze-mask generation policies."""
from __future__ import annotations

from typing import Optional

from ..schemas import EndpointConfig
from . import base, heuristics, llm, prompt
from .base import EmptyMaskGenerator, MaskFeedback, MaskGenerator
from .heuristics import (
    KMeansMaskGenerator,
    KnnMaskGenerator,
    OptimumMaskGenerator,
    RandomMaskGenerator,
    StabilityMaskGenerator,
)
from .llm import LlmMaskGenerator

HISTORY_METHODS = ("stability", "knn", "kmeans")
METHODS = ("milp", "stability", "knn", "kmeans", "random", "fix-at-optimum", "llm")


def build_generator(
    name: str,
    *,
    H: int = 3,
    k_cap: Optional[int] = None,
    k_neighbors: int = 5,
    n_clusters: Optional[int] = None,
    ratio: float = 0.1,
    seed: int = 0,
    endpoint: Optional[EndpointConfig] = None,
) -> MaskGenerator:
    """Instantiate a generator by method name with the shared parameter surface."""

    if name == "milp":
        return EmptyMaskGenerator(k_cap)
    if name == "stability":
        return StabilityMaskGenerator(H=H, k_cap=k_cap)
    if name == "knn":
        return KnnMaskGenerator(k_neighbors=k_neighbors, k_cap=k_cap)
    if name == "kmeans":
        return KMeansMaskGenerator(n_clusters=n_clusters, k_cap=k_cap, seed=seed)
    if name == "random":
        return RandomMaskGenerator(ratio=ratio, seed=seed)
    if name == "fix-at-optimum":
        return OptimumMaskGenerator(ratio=ratio, seed=seed)
    if name == "llm":
        if endpoint is None:
            raise llm.ConfigError("the llm method requires an endpoint config (--endpoint-config)")
        return LlmMaskGenerator(endpoint, H=H, k_cap=k_cap)
    raise ValueError(f"unknown method {name!r}; expected one of {', '.join(METHODS)}")


__all__ = [
    "base",
    "heuristics",
    "llm",
    "prompt",
    "build_generator",
    "MaskFeedback",
    "MaskGenerator",
    "HISTORY_METHODS",
    "METHODS",
]
