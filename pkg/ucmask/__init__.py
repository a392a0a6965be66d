"""Commitment-restricted unit commitment: model, solver, freeze masks and experiments."""
from __future__ import annotations

from . import formulation, harness, instance, maskgen, restriction, simplex, solver, util
from .mask import FreezeMask, MaskEntry

__all__ = [
    "formulation",
    "harness",
    "instance",
    "maskgen",
    "restriction",
    "simplex",
    "solver",
    "util",
    "FreezeMask",
    "MaskEntry",
]
