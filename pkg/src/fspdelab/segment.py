"""Delay segments and trajectories on a uniform time grid.

A segment is the sliding window X_t(s) = X(t+s), s in [-r, 0], stored at
grid resolution; interpolation is deliberately unsupported so that delay
reads are always grid-aligned.  Trajectories carry their life time and
the explosion flag set by the integrator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ExplosionError, InputError

_GRID_TOL = 1e-9


def _steps(span: float, dt: float) -> int:
    k = span / dt
    rounded = round(k)
    if abs(k - rounded) > _GRID_TOL * max(1.0, abs(k)):
        raise InputError(f"grid step {dt} does not divide span {span}")
    return int(rounded)


@dataclass
class SegmentPath:
    """History over [-r, 0] of one path: values[k] is the state at -r + k*dt."""

    delay: float
    grid_step: float
    values: np.ndarray
    weighted: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise InputError("segment values must be a (lags+1, n_modes) array")
        expected = _steps(self.delay, self.grid_step) + 1
        if self.values.shape[0] != expected:
            raise InputError(
                f"segment stores {self.values.shape[0]} values, grid requires {expected}")

    @property
    def n_modes(self) -> int:
        return self.values.shape[1]

    def times(self) -> np.ndarray:
        return -self.delay + self.grid_step * np.arange(self.values.shape[0])

    def _index(self, s: float) -> int:
        if s > _GRID_TOL or s < -self.delay - _GRID_TOL:
            raise InputError(f"lag {s} outside [-{self.delay}, 0]")
        k = (s + self.delay) / self.grid_step
        rounded = round(k)
        if abs(k - rounded) > 1e-6:
            raise InputError(f"lag {s} is not grid aligned (step {self.grid_step})")
        return int(rounded)

    def value_at(self, s: float) -> np.ndarray:
        return self.values[self._index(s)]

    def sup_norm(self) -> float:
        return segment_norm(self)

    @classmethod
    def constant(cls, value, delay: float, grid_step: float, weighted: bool = False) -> "SegmentPath":
        value = np.asarray(value, dtype=float)
        k = _steps(delay, grid_step)
        return cls(delay, grid_step, np.tile(value, (k + 1, 1)), weighted)

    @classmethod
    def from_function(cls, fn: Callable[[float], np.ndarray], delay: float,
                      grid_step: float, weighted: bool = False) -> "SegmentPath":
        k = _steps(delay, grid_step)
        times = -delay + grid_step * np.arange(k + 1)
        return cls(delay, grid_step, np.array([np.asarray(fn(t), dtype=float) for t in times]),
                   weighted)


def segment_norm(xi: SegmentPath) -> float:
    """Sup norm over the window; the weighted variant applies exp(-s)."""
    if xi.values.size == 0:
        raise InputError("empty segment")
    mags = np.linalg.norm(xi.values, axis=1)
    if xi.weighted:
        mags = mags * np.exp(-xi.times())
    return float(np.max(mags))


def continuity_modulus(xi: SegmentPath) -> float:
    """Largest one-step increment; reported as a diagnostic, no verdict attached."""
    if xi.values.shape[0] < 2:
        return 0.0
    return float(np.max(np.linalg.norm(np.diff(xi.values, axis=0), axis=1)))


@dataclass
class Trajectory:
    """One path on [-r, min(T, zeta)] with its life-time bookkeeping."""

    delay: float
    grid_step: float
    states: np.ndarray
    horizon: float
    life_time: float = math.inf
    exploded: bool = False
    seed: int | None = None
    convolution: np.ndarray | None = None
    stopping_levels: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim != 2:
            raise InputError("trajectory states must be a (steps, n_modes) array")

    @property
    def n_modes(self) -> int:
        return self.states.shape[1]

    @property
    def final_time(self) -> float:
        return -self.delay + self.grid_step * (self.states.shape[0] - 1)

    def times(self) -> np.ndarray:
        return -self.delay + self.grid_step * np.arange(self.states.shape[0])

    def _index(self, t: float) -> int:
        k = (t + self.delay) / self.grid_step
        rounded = round(k)
        if abs(k - rounded) > 1e-6:
            raise InputError(f"time {t} is not grid aligned (step {self.grid_step})")
        if rounded < 0 or rounded >= self.states.shape[0]:
            raise InputError(f"time {t} outside stored range")
        return int(rounded)

    def state(self, t: float) -> np.ndarray:
        return self.states[self._index(t)]

    def to_csv(self, path, header_fields: dict | None = None) -> None:
        """Write (t, mode_1, ..., mode_n) rows with 17 significant digits."""
        fields = {"seed": self.seed, "grid_step": self.grid_step, "delay": self.delay,
                  "life_time": self.life_time, "exploded": self.exploded}
        if header_fields:
            fields.update(header_fields)
        with open(path, "w", encoding="utf-8") as fh:
            for key, val in fields.items():
                fh.write(f"# {key}={val}\n")
            cols = ",".join(f"mode_{i + 1}" for i in range(self.n_modes))
            fh.write(f"t,{cols}\n")
            for t, row in zip(self.times(), self.states):
                vals = ",".join(f"{v:.17g}" for v in row)
                fh.write(f"{t:.17g},{vals}\n")


def extract_segment(tr: Trajectory, t: float, weighted: bool = False) -> SegmentPath:
    """Slice the window [t-r, t] out of a trajectory."""
    if t < -_GRID_TOL:
        raise InputError("segments are extracted at times t >= 0")
    if t > tr.life_time + _GRID_TOL:
        raise ExplosionError(f"time {t} is beyond the recorded life time {tr.life_time}")
    hi = tr._index(t)
    lo = hi - _steps(tr.delay, tr.grid_step)
    if lo < 0:
        raise InputError(f"trajectory history does not cover [{t - tr.delay}, {t}]")
    return SegmentPath(tr.delay, tr.grid_step, tr.states[lo:hi + 1].copy(), weighted)


def stopping_time(tr: Trajectory, n: float) -> float:
    """First grid time with |X(t)| >= n, capped at n; the cap when never exceeded."""
    if n in tr.stopping_levels:
        return tr.stopping_levels[n]
    start = tr._index(0.0)
    mags = np.linalg.norm(tr.states[start:], axis=1)
    mags = np.where(np.isfinite(mags), mags, np.inf)
    hits = np.nonzero(mags >= n)[0]
    tau = float(n) if hits.size == 0 else min(float(n), float(hits[0] * tr.grid_step))
    tr.stopping_levels[n] = tau
    return tau
