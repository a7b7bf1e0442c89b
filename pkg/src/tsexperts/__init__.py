"""Timestep-interval LoRA experts for a miniature diffusion denoiser."""

from .numerics import ParamStore, finite_diff_check, loss_and_grads, matmul
from .schedule import (
    IntervalPartition,
    NoiseSchedule,
    ScaleSet,
    forward_diffuse,
    interval_bounds,
    interval_index,
    make_schedule,
    multi_scale_indices,
)

__version__ = "0.1.0"

__all__ = [
    "IntervalPartition",
    "NoiseSchedule",
    "ParamStore",
    "ScaleSet",
    "finite_diff_check",
    "forward_diffuse",
    "interval_bounds",
    "interval_index",
    "loss_and_grads",
    "make_schedule",
    "matmul",
    "multi_scale_indices",
]
