"""SGLD chains, the persistent replay buffer, and likelihood ascent."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


class SamplerError(Exception):
    pass


@dataclass
class SgldConfig:
    steps: int = 100
    step_size: float = 1.0
    noise_std: float = 0.01
    coupled_noise: bool = False  # Welling-Teh pairing sigma = sqrt(step_size)
    clamp_min: np.ndarray | None = None
    clamp_max: np.ndarray | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise SamplerError("steps must be >= 0")
        if self.step_size <= 0:
            raise SamplerError("step size must be positive")
        if self.noise_std < 0:
            raise SamplerError("noise std must be nonnegative")

    @property
    def sigma(self) -> float:
        return math.sqrt(self.step_size) if self.coupled_noise else self.noise_std


def _input_grad(energy_fn, x: np.ndarray) -> np.ndarray:
    xn = ad.leaf(x)
    e = energy_fn(xn)
    e_total = ad.reduce_sum(e) if e.value.ndim else e
    (g,) = ad.grad(e_total, [xn])
    return g.value


def sgld_chain(energy_fn, x0, config: SgldConfig, rng: np.random.Generator,
               record: bool = False):
    """x <- x - (alpha/2) * dE/dx + sigma * eps, run for ``steps`` steps.

    Parameters inside ``energy_fn`` must be constants; no parameter
    gradients are recorded. Returns endpoints, or the whole visited
    trajectory when ``record`` is set.
    """
    x = np.array(x0, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise SamplerError("non-finite chain initialization")
    trajectory = [x.copy()] if record else None
    for step in range(config.steps):
        g = _input_grad(energy_fn, x)
        if not np.all(np.isfinite(g)):
            raise SamplerError(f"non-finite energy gradient at SGLD step {step}")
        x = x - 0.5 * config.step_size * g
        if config.sigma > 0:
            x = x + config.sigma * rng.normal(size=x.shape)
        if config.clamp_min is not None:
            x = np.maximum(x, config.clamp_min)
        if config.clamp_max is not None:
            x = np.minimum(x, config.clamp_max)
        if record:
            trajectory.append(x.copy())
    return np.asarray(trajectory) if record else x


@dataclass
class ReplayBuffer:
    """Persistent-chain storage with probabilistic reinitialization.

    ``reinit_sampler(rng, n)`` draws fresh starting points; by default
    the trainer wires it to a uniform box over the training data.
    """

    capacity: int = 10000
    reinit_prob: float = 0.05
    reinit_sampler: object = None
    _storage: np.ndarray | None = field(default=None, repr=False)
    _size: int = 0
    _write_pos: int = 0

    def __post_init__(self):
        if not 0.0 <= self.reinit_prob <= 1.0:
            raise SamplerError("reinit probability must lie in [0, 1]")
        if self.capacity < 1:
            raise SamplerError("capacity must be >= 1")

    def __len__(self) -> int:
        return self._size

    def _ensure_storage(self, dim: int):
        if self._storage is None:
            self._storage = np.zeros((self.capacity, dim))

    def draw(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Starting points plus the slot indices for writing back.

        Each point is fresh with probability ``reinit_prob`` (always, if
        the buffer is empty), otherwise drawn uniformly from storage.
        """
        if n < 1:
            raise SamplerError("must draw at least one point")
        if self.reinit_sampler is None:
            raise SamplerError("no reinit sampler configured")
        fresh = rng.random(n) < self.reinit_prob
        if self._size == 0:
            fresh[:] = True
        size_before = self._size
        indices = np.zeros(n, dtype=np.int64)
        n_fresh = int(fresh.sum())
        if n_fresh:
            fresh_points = np.atleast_2d(self.reinit_sampler(rng, n_fresh))
            dim = fresh_points.shape[1]
        else:
            dim = self._storage.shape[1]
        self._ensure_storage(dim)
        points = np.zeros((n, dim))
        if n_fresh:
            points[fresh] = fresh_points
            for i in np.where(fresh)[0]:
                if self._size < self.capacity:
                    indices[i] = self._size
                    self._size += 1
                else:
                    indices[i] = rng.integers(0, self.capacity)
        if n_fresh < n:
            # only slots written before this draw; fresh slots claimed above
            # have not been populated yet
            old_idx = rng.integers(0, size_before, size=n - n_fresh)
            indices[~fresh] = old_idx
            points[~fresh] = self._storage[old_idx]
        return points, indices

    def write(self, indices, samples):
        samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        indices = np.asarray(indices, dtype=np.int64)
        self._ensure_storage(samples.shape[1])
        if indices.size and (indices.min() < 0 or indices.max() >= self.capacity):
            raise SamplerError("buffer index out of range")
        self._storage[indices] = samples
        self._size = max(self._size, int(indices.max()) + 1 if indices.size else 0)

    def append(self, samples):
        """Rolling insertion; size never exceeds capacity."""
        samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        self._ensure_storage(samples.shape[1])
        for row in samples:
            self._storage[self._write_pos] = row
            self._write_pos = (self._write_pos + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)

    def contents(self) -> np.ndarray:
        return self._storage[: self._size].copy() if self._storage is not None else np.zeros((0, 0))


@dataclass
class AscentTrajectory:
    points: np.ndarray       # (T+1, ...) visited inputs
    logdensity: np.ndarray   # (T+1,) unnormalized log-density per point
    diverged: bool = False


def likelihood_ascent(energy_fn, x, steps: int, lr: float) -> AscentTrajectory:
    """Gradient ascent on log p~ = -E in input space; records the path."""
    if lr <= 0:
        raise SamplerError("learning rate must be positive")
    x = np.array(x, dtype=np.float64)
    e = energy_fn(ad.constant(x))
    logp = -(e.value.sum() if e.value.ndim else float(e.value))
    points = [x.copy()]
    logps = [logp]
    diverged = False
    for _ in range(steps):
        g = _input_grad(energy_fn, x)
        if not np.all(np.isfinite(g)):
            diverged = True
            break
        x = x - lr * g  # ascent on -E
        e = energy_fn(ad.constant(x))
        logp = -(e.value.sum() if e.value.ndim else float(e.value))
        if not np.isfinite(logp):
            diverged = True
            break
        points.append(x.copy())
        logps.append(logp)
    return AscentTrajectory(np.asarray(points), np.asarray(logps), diverged)
