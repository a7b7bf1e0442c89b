"""Finite-difference audits of the stage losses on random parameter draws."""

from __future__ import annotations

import numpy as np

from .data import Dataset
from .model import DenoiserModel, Mode, denoising_loss
from .numerics import finite_diff_check
from .schedule import NoiseSchedule, interval_bounds


def randomize(model: DenoiserModel, rng: np.random.Generator, scale: float = 1.0) -> None:
    """Redraw every tensor from the model's own initializer family.

    Each tensor gets ``U(-b, b)`` with ``b = scale / sqrt(fan_in)``, taking
    fan-in as the column count of a matrix and the length of a vector. This
    also fills the zero-initialized B, bias and router tensors, so no gradient
    path is trivially zero.
    """
    for arr in model.params.tensors.values():
        bound = scale / np.sqrt(arr.shape[-1])
        arr[...] = rng.uniform(-bound, bound, size=arr.shape)


def fostering_error(model, dataset: Dataset, sched: NoiseSchedule, rng, batch: int = 4, step: float = 1e-5) -> float:
    """Check the per-interval loss of one randomly chosen expert."""
    scales = model.scales.scales
    n = int(scales[rng.integers(len(scales))])
    i = int(rng.integers(1, n + 1))
    lo, hi = interval_bounds(i, sched.T, n)
    x0, c = dataset.batch(rng, batch)
    t = rng.integers(lo, hi + 1, size=batch)
    eps = rng.standard_normal(x0.shape)
    model.params.only_trainable(model.expert_names(n, i))
    loss_fn = denoising_loss(model, x0, t, eps, sched, c if model.n_classes else None, Mode.fostering(n))
    try:
        return finite_diff_check(loss_fn, model.params, step)
    finally:
        model.params.freeze_all()


def assembling_error(model, dataset: Dataset, sched: NoiseSchedule, rng, batch: int = 4, step: float = 1e-5) -> float:
    x0, c = dataset.batch(rng, batch)
    t = rng.integers(1, sched.T + 1, size=batch)
    eps = rng.standard_normal(x0.shape)
    model.params.only_trainable(model.router_names())
    loss_fn = denoising_loss(model, x0, t, eps, sched, c if model.n_classes else None, Mode.assembled())
    try:
        return finite_diff_check(loss_fn, model.params, step)
    finally:
        model.params.freeze_all()


def base_error(model, dataset: Dataset, sched: NoiseSchedule, rng, batch: int = 4, step: float = 1e-5) -> float:
    x0, c = dataset.batch(rng, batch)
    t = rng.integers(1, sched.T + 1, size=batch)
    eps = rng.standard_normal(x0.shape)
    model.params.only_trainable(model.base_names())
    loss_fn = denoising_loss(model, x0, t, eps, sched, c if model.n_classes else None, Mode.base())
    try:
        return finite_diff_check(loss_fn, model.params, step)
    finally:
        model.params.freeze_all()
