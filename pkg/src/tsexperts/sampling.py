"""DDPM ancestral sampling with per-step expert selection."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import make_rng
from .errors import DivergenceError
from .model import ForwardCache, Mode
from .schedule import NoiseSchedule, interval_index


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 1000
    mode: Mode = Mode.base()
    seed: int = 0
    batch: int = 2000
    variance: str = "posterior"

    def __post_init__(self):
        if self.batch < 1:
            raise ValueError("batch must be positive")
        if self.variance not in ("posterior", "beta"):
            raise ValueError(f"unknown variance choice {self.variance!r}")


@dataclass
class SampleResult:
    samples: np.ndarray
    # (t, active interval per scale) for every reverse step, t = T .. 1
    expert_log: list[tuple[int, tuple[int, ...]]] = field(default_factory=list)
    switch_events: list[int] = field(default_factory=list)
    # (t, layer, batch-mean gate vector)
    gate_log: list[tuple[int, str, np.ndarray]] = field(default_factory=list)


def posterior_sigma(sched: NoiseSchedule, t: int, variance: str = "posterior") -> float:
    if t == 1:
        return 0.0
    beta = sched.betas[t - 1]
    if variance == "beta":
        return float(np.sqrt(beta))
    ab_t = sched.abar(t)
    ab_prev = sched.abar(t - 1)
    return float(np.sqrt(beta * (1.0 - ab_prev) / (1.0 - ab_t)))


def posterior_mean(x_t, t: int, eps_hat, sched: NoiseSchedule) -> np.ndarray:
    alpha = sched.alphas[t - 1]
    beta = sched.betas[t - 1]
    return (x_t - (beta / np.sqrt(1.0 - sched.abar(t))) * eps_hat) / np.sqrt(alpha)


def ancestral_step(
    model,
    x_t: np.ndarray,
    t: int,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    mode: Mode,
    c=None,
    variance: str = "posterior",
    eps_hat: np.ndarray | None = None,
    cache: ForwardCache | None = None,
) -> np.ndarray:
    """One reverse step ``x_t -> x_{t-1}``.

    ``eps_hat`` overrides the model prediction, which lets callers drive the
    update with the true noise. No noise is drawn at ``t == 1``.
    """
    if not (1 <= t <= sched.T):
        raise ValueError(f"timestep {t} out of range [1, {sched.T}]")
    if eps_hat is None:
        eps_hat = model.forward(x_t, t, c, mode, cache)
    mean = posterior_mean(x_t, t, eps_hat, sched)
    if t == 1:
        return mean
    return mean + posterior_sigma(sched, t, variance) * rng.standard_normal(x_t.shape)


def sample(model, sched: NoiseSchedule, config: SamplerConfig, c=None) -> SampleResult:
    """Run the full chain ``t = T .. 1`` from standard normal noise."""
    if config.steps != sched.T:
        raise ValueError(f"only full ancestral chains are supported (steps={config.steps}, T={sched.T})")
    mode = config.mode
    rng = make_rng(config.seed, "sample")
    x = rng.standard_normal((config.batch, model.data_dim))
    if c is not None and model.n_classes:
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (config.batch,))
    result = SampleResult(samples=x)
    if mode.kind == "fostering":
        log_scales = (mode.scale,)
    elif mode.kind == "assembled":
        log_scales = model.scales.scales
    else:
        log_scales = ()
    record_gates = mode.kind == "assembled" and model.scales is not None and model.scales.m > 1
    prev = None
    for t in range(sched.T, 0, -1):
        active = tuple(interval_index(t, sched.T, n) for n in log_scales)
        result.expert_log.append((t, active))
        if prev is not None and active and active[0] != prev[0]:
            result.switch_events.append(t)
        prev = active
        cache = ForwardCache() if record_gates else None
        x = ancestral_step(model, x, t, sched, rng, mode, c, config.variance, cache=cache)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"non-finite sample at step t={t}")
        if record_gates:
            for layer, g in cache.gates.items():
                result.gate_log.append((t, layer, g.mean(axis=0)))
    result.samples = x
    return result
