"""Flow schedules, probability-path states and Euler integration.

Time convention: t=0 is data, t=1 is noise. Generation integrates from high t
to low t, so an Euler step is ``x <- x - dt * v(x, t)``.

All functions accept a single vector of shape ``(d,)`` or a batch of shape
``(n, d)``. Path functions also accept ``t`` of shape ``(n,)``, one time per row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

VelocityField = Callable[[np.ndarray, float], np.ndarray]


class FlowError(ValueError):
    """Raised on invalid arguments to flow kernels."""


class NonFiniteError(FloatingPointError):
    """Raised when a computation produces NaN or Inf."""


@dataclass(frozen=True)
class Schedule:
    """Scalar coefficients of the path ``x_t = a_t * x + b_t * eps``."""

    kind: str = "linear"

    def __post_init__(self):
        if self.kind != "linear":
            raise FlowError(f"unsupported schedule kind {self.kind!r}")

    def eval(self, t):
        """Return ``(a_t, b_t, da_t, db_t)``."""
        t = _check_time(t)
        return 1.0 - t, t, -1.0, 1.0


LINEAR = Schedule()


@dataclass
class Trajectory:
    """Ordered states of an integrated path, with decreasing ``t``."""

    times: np.ndarray
    states: np.ndarray  # (n_states, *x.shape)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        if len(self.times) < 2 or len(self.times) != len(self.states):
            raise FlowError("a trajectory needs at least 2 states with one time each")
        if np.any(np.diff(self.times) >= 0):
            raise FlowError("trajectory times must be strictly decreasing")

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def __len__(self):
        return len(self.times)


def _check_time(t, lo: float = 0.0, hi: float = 1.0):
    if np.ndim(t) == 0:
        t = float(t)
        if not (lo <= t <= hi):
            raise FlowError(f"t={t} outside [{lo}, {hi}]")
        return t
    t = np.asarray(t, dtype=np.float64)
    if not np.all((t >= lo) & (t <= hi)):
        bad = t[~((t >= lo) & (t <= hi))][0]
        raise FlowError(f"t={bad} outside [{lo}, {hi}]")
    return t


def _col(c, x: np.ndarray):
    """Broadcast a per-row coefficient against a batch."""
    if np.ndim(c) == 0:
        return c
    if x.ndim != 2 or c.shape != (x.shape[0],):
        raise FlowError(f"time array of shape {c.shape} does not match batch {x.shape}")
    return c[:, None]


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise FlowError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def interpolate(x, eps, t: float, sched: Schedule = LINEAR) -> np.ndarray:
    """Point on the probability path between data ``x`` and noise ``eps``."""
    x, eps = _pair(x, eps)
    a, b, _, _ = sched.eval(t)
    if np.ndim(t) == 0:
        # Exact endpoints, including signed zeros.
        if b == 0.0:
            return x.copy()
        if a == 0.0:
            return eps.copy()
    return _col(a, x) * x + _col(b, x) * eps


def conditional_velocity(x, eps, t: float, sched: Schedule = LINEAR) -> np.ndarray:
    """Time derivative of the path for fixed endpoints; ``eps - x`` when linear."""
    x, eps = _pair(x, eps)
    _, _, da, db = sched.eval(t)
    return _col(da, x) * x + _col(db, x) * eps


def rescaled_sr_state(z_h, z_l, t: float, t_star: float) -> np.ndarray:
    """State on the straight clean-to-degraded path, with ``z_l`` sitting at ``t_star``."""
    z_h, z_l = _pair(z_h, z_l)
    t_star = float(t_star)
    if not (0.0 < t_star <= 1.0):
        raise FlowError(f"t_star={t_star} must lie in (0, 1]")
    t = _check_time(t, 0.0, t_star)
    return interpolate(z_h, z_l, np.minimum(t / t_star, 1.0))


def euler_sample(
    field: VelocityField,
    x_start,
    t_start: float,
    t_end: float,
    n_steps: int,
) -> Trajectory:
    """Integrate ``dx/dt = field(x, t)`` backwards from ``t_start`` to ``t_end``.

    Uses ``n_steps`` uniform steps; every intermediate state is recorded.
    """
    if not (1.0 >= t_start > t_end >= 0.0):
        raise FlowError(f"need 1 >= t_start > t_end >= 0, got {t_start}, {t_end}")
    if n_steps < 1:
        raise FlowError("n_steps must be >= 1")
    x = np.array(x_start, dtype=np.float64)
    dt = (t_start - t_end) / n_steps
    times = [t_start]
    states = [x.copy()]
    for i in range(n_steps):
        t = t_start - i * dt
        v = np.asarray(field(x, t), dtype=np.float64)
        if v.shape != x.shape:
            raise FlowError(f"field returned shape {v.shape}, expected {x.shape}")
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"non-finite velocity at t={t}")
        x = x - dt * v
        times.append(t_end if i == n_steps - 1 else t_start - (i + 1) * dt)
        states.append(x.copy())
    return Trajectory(np.array(times), np.stack(states))


def one_step_restore(field: VelocityField, z_l, t_star: float) -> np.ndarray:
    """Single Euler step from ``z_l`` at ``t_star`` down to ``t = 0``."""
    t_star = float(t_star)
    if not (0.0 < t_star <= 1.0) or math.isnan(t_star):
        raise FlowError(f"t_star={t_star} must lie in (0, 1]")
    z_l = np.asarray(z_l, dtype=np.float64)
    v = np.asarray(field(z_l, t_star), dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"non-finite velocity at t={t_star}")
    return z_l - t_star * v
