"""Synthetic datasets, generated on demand from a seed."""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass

import numpy as np


def make_rng(seed: int, name: str = "") -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``seed`` and a stream name."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode())])
    return np.random.Generator(np.random.Philox(ss))


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-serialisable bit-generator state."""
    state = rng.bit_generator.state
    return _jsonable(state)


def set_rng_state(rng: np.random.Generator, state: dict) -> None:
    st = dict(state)
    inner = {k: (np.asarray(v, dtype=np.uint64) if isinstance(v, list) else v) for k, v in st["state"].items()}
    st["state"] = inner
    if isinstance(st.get("buffer"), list):
        st["buffer"] = np.asarray(st["buffer"], dtype=np.uint64)
    rng.bit_generator.state = st


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return [int(v) for v in obj.tolist()]
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def batch(self, rng: np.random.Generator, size: int):
        idx = rng.integers(0, len(self), size=size)
        return self.x[idx], None if self.labels is None else self.labels[idx]


def mode_centers(modes: int = 8, radius: float = 4.0, rotation: float = 0.0) -> np.ndarray:
    angles = 2 * math.pi * np.arange(modes) / modes + rotation
    return radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)


def gaussian_mixture(
    n: int,
    rng: np.random.Generator,
    modes: int = 8,
    radius: float = 4.0,
    sigma: float = 0.15,
    rotation: float = 0.0,
) -> Dataset:
    """Equal-weight isotropic Gaussians centred on a circle."""
    centers = mode_centers(modes, radius, rotation)
    labels = rng.integers(0, modes, size=n)
    x = centers[labels] + sigma * rng.standard_normal((n, 2))
    return Dataset(x, labels)


def checkerboard_blobs(n: int, rng: np.random.Generator, size: int = 8, blob_width: float = 1.2) -> Dataset:
    """8x8 rasters: a checkerboard of random phase and contrast plus one Gaussian blob.

    Label is the checkerboard phase (0 or 1). Pixels are flattened row-major.
    """
    yy, xx = np.mgrid[0:size, 0:size]
    board = np.where((yy + xx) % 2 == 0, 1.0, -1.0)
    phase = rng.integers(0, 2, size=n)
    contrast = rng.uniform(0.3, 0.7, size=n)
    cy = rng.uniform(0, size - 1, size=n)
    cx = rng.uniform(0, size - 1, size=n)
    sign = np.where(phase == 0, 1.0, -1.0)
    imgs = sign[:, None, None] * contrast[:, None, None] * board[None]
    blob = np.exp(
        -((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2)
        / (2 * blob_width**2)
    )
    imgs = imgs + blob
    return Dataset(imgs.reshape(n, size * size), phase)


def make_dataset(kind: str, n: int, rng: np.random.Generator, **kwargs) -> Dataset:
    if kind == "gaussian_mixture":
        return gaussian_mixture(n, rng, **kwargs)
    if kind == "checkerboard_blobs":
        return checkerboard_blobs(n, rng, **kwargs)
    raise ValueError(f"unknown dataset kind {kind!r}")
