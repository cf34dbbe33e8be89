"""Desk-scale lab for training energy-based density models and studying
their out-of-distribution detection behavior."""

from . import autodiff, data, evaluate, models, objectives, rng, samplers, training

__all__ = [
    "autodiff",
    "data",
    "evaluate",
    "models",
    "objectives",
    "rng",
    "samplers",
    "training",
]
