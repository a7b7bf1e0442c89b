"""Base pre-training, per-interval expert fitting and router-only assembling."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, make_rng
from .errors import DivergenceError, InvariantViolation
from .model import ASSEMBLED, BASE, DenoiserModel, Mode, denoising_loss
from .numerics import ParamStore, loss_and_grads
from .schedule import IntervalPartition, NoiseSchedule, ScaleSet, interval_bounds

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1e6


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "base"
    scales: ScaleSet = ScaleSet((8, 1))
    lora_rank: int = 4
    lora_alpha: float = 4.0
    steps: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    dispatch: str = "sequential"

    def __post_init__(self):
        if self.stage not in ("base", "fostering", "assembling"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch size positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("learning rate and weight decay must be non-negative")
        if not all(0 < b < 1 for b in self.betas):
            raise ValueError(f"betas must lie in (0, 1), got {self.betas}")
        if self.dispatch not in ("sequential", "joint"):
            raise ValueError(f"unknown dispatch {self.dispatch!r}")


@dataclass
class TrainReport:
    stage: str
    trace: list[tuple[str, int, float]] = field(default_factory=list)
    interval_val_loss: dict[str, list[float]] = field(default_factory=dict)
    trainable_params: int = 0
    wall_clock: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [loss for _, _, loss in self.trace]

    def summary(self) -> dict:
        """Deterministic summary; wall-clock is kept out so reruns match byte for byte."""
        losses = self.losses
        return {
            "stage": self.stage,
            "steps": len(losses),
            "trainable_params": self.trainable_params,
            "final_loss": losses[-1] if losses else None,
            "mean_loss_last_100": float(np.mean(losses[-100:])) if losses else None,
            "interval_val_loss": self.interval_val_loss,
        }


class AdamW:
    """Adam with bias correction and decoupled weight decay, one state per tensor."""

    def __init__(self, lr=1e-3, betas=(0.9, 0.999), weight_decay=1e-2, eps=1e-8):
        self.lr = lr
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.state: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.step_count = 0

    def step(self, params: ParamStore) -> None:
        self.step_count += 1
        adamw_update(
            params, self.state, self.lr, self.betas, self.weight_decay, self.step_count, self.eps
        )


def adamw_update(params, state, lr, betas, weight_decay, step_count, eps=1e-8) -> None:
    """In-place AdamW step over every trainable tensor of ``params``."""
    b1, b2 = betas
    c1 = 1.0 - b1**step_count
    c2 = 1.0 - b2**step_count
    for name in params.trainable_names():
        w = params.tensors[name]
        g = params.grads[name]
        if name not in state:
            state[name] = (np.zeros_like(w), np.zeros_like(w))
        m, v = state[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if weight_decay:
            w *= 1.0 - lr * weight_decay
        w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def sample_timestep_in_interval(i: int, partition: IntervalPartition, rng, size=None):
    lo, hi = interval_bounds(i, partition.T, partition.n)
    return rng.integers(lo, hi + 1, size=size)


def _step(model, params, opt, x0, t, eps, sched, c, mode, unit, step, report):
    loss_fn = denoising_loss(model, x0, t, eps, sched, c, mode)
    params.zero_grad()
    loss, _ = loss_and_grads(loss_fn, params)
    if loss > DIVERGENCE_THRESHOLD:
        raise DivergenceError(f"loss {loss:.3g} exceeded {DIVERGENCE_THRESHOLD:g} at {unit} step {step}")
    opt.step(params)
    report.trace.append((unit, step, loss))
    return loss


def _cond(model, c):
    return c if model.n_classes else None


def train_base(
    model: DenoiserModel,
    dataset: Dataset,
    sched: NoiseSchedule,
    config: TrainConfig,
    val: Dataset | None = None,
    rng: np.random.Generator | None = None,
) -> TrainReport:
    if model.scales is not None:
        raise ValueError("base training expects a model without adapters")
    params = model.params
    params.only_trainable(model.base_names())
    rng = make_rng(config.seed, "train-base") if rng is None else rng
    report = TrainReport("base", trainable_params=params.count(trainable_only=True))
    opt = AdamW(config.lr, config.betas, config.weight_decay)
    start = time.perf_counter()
    for step in range(config.steps):
        x0, c = dataset.batch(rng, config.batch_size)
        t = rng.integers(1, sched.T + 1, size=config.batch_size)
        eps = rng.standard_normal(x0.shape)
        _step(model, params, opt, x0, t, eps, sched, _cond(model, c), BASE, "base", step, report)
    report.wall_clock = time.perf_counter() - start
    if val is not None:
        report.interval_val_loss = _val_losses(model, val, sched, config, [BASE])
    return report


def _check_frozen_grads(params: ParamStore, names) -> None:
    for n in names:
        if np.any(params.grads[n]):
            raise InvariantViolation(f"frozen tensor {n} received gradient")


def train_fostering(
    model: DenoiserModel,
    dataset: Dataset,
    sched: NoiseSchedule,
    config: TrainConfig,
    val: Dataset | None = None,
    rng: np.random.Generator | None = None,
) -> TrainReport:
    """Fit every expert of every scale on timesteps inside its own interval.

    Sequential dispatch trains one (scale, interval) pair at a time with only
    that pair's tensors trainable. Joint dispatch trains all experts of a
    scale together, sampling ``t`` over ``[1, T]`` and routing each sample to
    its expert; it runs ``n * steps`` updates per scale so every expert sees
    the same number of samples in expectation.
    """
    if model.scales is None:
        model.attach_experts(config.scales, config.lora_rank, config.lora_alpha, make_rng(config.seed, "lora-init"))
    scales = model.scales
    params = model.params
    base_names = model.base_names()
    base_before = params.snapshot(base_names)
    rng = make_rng(config.seed, "train-fostering") if rng is None else rng
    report = TrainReport("fostering", trainable_params=model.adapter_param_count())
    start = time.perf_counter()
    bs = config.batch_size
    for n in scales:
        mode = Mode.fostering(n)
        partition = IntervalPartition(sched.T, n)
        if config.dispatch == "joint":
            params.only_trainable(model.expert_names(n))
            opt = AdamW(config.lr, config.betas, config.weight_decay)
            for step in range(config.steps * n):
                x0, c = dataset.batch(rng, bs)
                t = rng.integers(1, sched.T + 1, size=bs)
                eps = rng.standard_normal(x0.shape)
                _step(model, params, opt, x0, t, eps, sched, _cond(model, c), mode, f"n{n}", step, report)
                _check_frozen_grads(params, base_names)
            continue
        for i in range(1, n + 1):
            params.only_trainable(model.expert_names(n, i))
            opt = AdamW(config.lr, config.betas, config.weight_decay)
            for step in range(config.steps):
                x0, c = dataset.batch(rng, bs)
                t = sample_timestep_in_interval(i, partition, rng, size=bs)
                eps = rng.standard_normal(x0.shape)
                _step(model, params, opt, x0, t, eps, sched, _cond(model, c), mode, f"n{n}.i{i}", step, report)
                _check_frozen_grads(params, base_names)
            log.debug("fostered expert n=%d i=%d, last loss %.4f", n, i, report.trace[-1][2] if report.trace else float("nan"))
    params.freeze_all()
    if params.snapshot(base_names) != base_before:
        raise InvariantViolation("base tensors changed during fostering")
    report.wall_clock = time.perf_counter() - start
    if val is not None:
        report.interval_val_loss = _val_losses(model, val, sched, config, [Mode.fostering(n) for n in scales])
    return report


def train_assembling(
    model: DenoiserModel,
    dataset: Dataset,
    sched: NoiseSchedule,
    config: TrainConfig,
    val: Dataset | None = None,
    rng: np.random.Generator | None = None,
) -> TrainReport:
    if model.scales is None:
        raise ValueError("assembling needs a fostered expert bank")
    if not model.has_routers:
        model.attach_routers()
    params = model.params
    frozen = [n for n in params if ".router." not in n]
    experts_before = params.snapshot(model.expert_names())
    params.only_trainable(model.router_names())
    rng = make_rng(config.seed, "train-assembling") if rng is None else rng
    report = TrainReport("assembling", trainable_params=params.count(trainable_only=True))
    opt = AdamW(config.lr, config.betas, config.weight_decay)
    start = time.perf_counter()
    steps = config.steps if model.router_names() else 0
    for step in range(steps):
        x0, c = dataset.batch(rng, config.batch_size)
        t = rng.integers(1, sched.T + 1, size=config.batch_size)
        eps = rng.standard_normal(x0.shape)
        _step(model, params, opt, x0, t, eps, sched, _cond(model, c), ASSEMBLED, "router", step, report)
        _check_frozen_grads(params, frozen)
    params.freeze_all()
    if params.snapshot(model.expert_names()) != experts_before:
        raise InvariantViolation("expert tensors changed during assembling")
    report.wall_clock = time.perf_counter() - start
    if val is not None:
        report.interval_val_loss = _val_losses(model, val, sched, config, [ASSEMBLED])
    return report


def _val_losses(model, val, sched, config, modes) -> dict[str, list[float]]:
    from .evaluate import per_interval_loss

    n = config.scales.core
    partition = IntervalPartition(sched.T, n)
    return {
        str(mode): [float(v) for v in per_interval_loss(model, val, sched, partition, mode, 256, seed=config.seed)]
        for mode in modes
    }
