"""Seed handling: one master seed, fixed named sub-streams.

Each component draws from its own stream keyed by a fixed integer id
(the spawn key), so adding a new component or reordering draws in one
component never perturbs another. New names must be appended with fresh
ids, never renumbered.
"""

from __future__ import annotations

import numpy as np

STREAM_IDS = {
    "init": 0,        # parameter initialization
    "data": 1,        # batch shuffling, synthetic data generation
    "sgld": 2,        # Langevin noise
    "projection": 3,  # SSM Rademacher vectors
    "vera": 4,        # generator latents and posterior samples
    "buffer": 5,      # replay-buffer draws and reinits
    "split": 6,       # dataset splitting
    "eval": 7,        # evaluation-time sampling (norm-sweep directions etc.)
}


def stream(master_seed: int, name: str) -> np.random.Generator:
    """Named, independent generator derived from the master seed."""
    return np.random.default_rng(
        np.random.SeedSequence(master_seed, spawn_key=(STREAM_IDS[name],))
    )


def rademacher(rng: np.random.Generator, shape) -> np.ndarray:
    return np.where(rng.random(shape) < 0.5, -1.0, 1.0)
