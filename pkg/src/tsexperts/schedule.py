"""Noise schedules, the forward kernel and timestep-interval arithmetic.

Timesteps are 1-based integers in ``[1, T]``. The interval of ``t`` in a
uniform partition of ``[1, T]`` into ``n`` pieces is ``ceil(t * n / T)``;
interval bounds are derived from that rule so the two always agree, also
when ``n`` does not divide ``T``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray = field(repr=False)
    kind: str = "linear"

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.shape != (self.T,):
            raise ShapeError(f"alpha_bar must have length T={self.T}, got {ab.shape}")
        if not (np.all(ab > 0) and np.all(ab <= 1)):
            raise ValueError("alpha_bar must lie in (0, 1]")
        if np.any(np.diff(ab) >= 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        ab = ab.copy()
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)

    def abar(self, t) -> np.ndarray | float:
        """Cumulative signal coefficient at 1-based ``t``; ``abar(0) == 1``."""
        t_arr = np.asarray(t)
        padded = np.concatenate(([1.0], self.alpha_bar))
        out = padded[t_arr]
        return float(out) if out.ndim == 0 else out

    @property
    def alphas(self) -> np.ndarray:
        prev = np.concatenate(([1.0], self.alpha_bar[:-1]))
        return self.alpha_bar / prev

    @property
    def betas(self) -> np.ndarray:
        return 1.0 - self.alphas


def make_schedule(
    T: int = 1000,
    kind: str = "linear",
    beta_min: float = 1e-4,
    beta_max: float = 2e-2,
    cosine_offset: float = 0.008,
) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be at least 2, got {T}")
    if kind == "linear":
        if not (0 < beta_min <= beta_max < 1):
            raise ValueError(f"invalid beta range [{beta_min}, {beta_max}]")
        betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
        alpha_bar = np.cumprod(1.0 - betas)
    elif kind == "cosine":
        s = cosine_offset
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        ratio = f[1:] / f[:-1]
        betas = np.clip(1.0 - ratio, 0.0, 0.999)
        alpha_bar = np.cumprod(1.0 - betas)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return NoiseSchedule(T=T, alpha_bar=alpha_bar, kind=kind)


def _check_t(t, T: int) -> np.ndarray:
    t_arr = np.asarray(t)
    if not np.issubdtype(t_arr.dtype, np.integer):
        raise TypeError("timesteps must be integers")
    if np.any(t_arr < 1) or np.any(t_arr > T):
        raise ValueError(f"timestep out of range [1, {T}]: {t}")
    return t_arr


def forward_diffuse(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``.

    ``t`` may be a scalar or one timestep per row of ``x0``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    t_arr = _check_t(t, sched.T)
    ab = np.asarray(sched.abar(t_arr), dtype=np.float64)
    if ab.ndim == 1:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


@dataclass(frozen=True)
class IntervalPartition:
    T: int
    n: int

    def __post_init__(self):
        if not (1 <= self.n <= self.T):
            raise ValueError(f"need 1 <= n <= T, got n={self.n}, T={self.T}")

    def index(self, t):
        return interval_index(t, self.T, self.n)

    def bounds(self, i: int) -> tuple[int, int]:
        return interval_bounds(i, self.T, self.n)

    def sizes(self) -> list[int]:
        return [hi - lo + 1 for lo, hi in map(self.bounds, range(1, self.n + 1))]


@dataclass(frozen=True)
class ScaleSet:
    """Interval counts ``n_1 > n_2 > ... > n_m >= 1``; ``n_1`` is the core scale."""

    scales: tuple[int, ...]

    def __post_init__(self):
        scales = tuple(int(s) for s in self.scales)
        if not scales:
            raise ValueError("scale set must be non-empty")
        if len(set(scales)) != len(scales):
            raise ValueError(f"duplicate scales in {scales}")
        if any(a <= b for a, b in zip(scales, scales[1:])):
            raise ValueError(f"scales must be strictly decreasing, got {scales}")
        if scales[-1] < 1:
            raise ValueError("scales must be >= 1")
        object.__setattr__(self, "scales", scales)

    def __len__(self) -> int:
        return len(self.scales)

    def __iter__(self):
        return iter(self.scales)

    def __getitem__(self, j: int) -> int:
        return self.scales[j]

    @property
    def m(self) -> int:
        return len(self.scales)

    @property
    def core(self) -> int:
        return self.scales[0]

    def total_experts(self) -> int:
        return sum(self.scales)


def interval_index(t, T: int, n: int):
    """``ceil(t * n / T)`` in exact integer arithmetic. Vectorised over ``t``."""
    if not (1 <= n <= T):
        raise ValueError(f"need 1 <= n <= T, got n={n}, T={T}")
    t_arr = _check_t(t, T).astype(np.int64)
    out = -((-t_arr * n) // T)
    return int(out) if out.ndim == 0 else out


def interval_bounds(i: int, T: int, n: int) -> tuple[int, int]:
    if not (1 <= n <= T):
        raise ValueError(f"need 1 <= n <= T, got n={n}, T={T}")
    if not (1 <= i <= n):
        raise ValueError(f"interval {i} out of range [1, {n}]")
    return (i - 1) * T // n + 1, i * T // n


def multi_scale_indices(t: int, T: int, scales: ScaleSet) -> tuple[int, ...]:
    return tuple(interval_index(t, T, n) for n in scales)
