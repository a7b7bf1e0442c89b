"""Held-out losses, sample distances, drift profiles and matched comparisons."""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .data import Dataset, make_rng
from .model import BASE, DenoiserModel, Mode
from .sampling import SamplerConfig, sample
from .schedule import IntervalPartition, NoiseSchedule, ScaleSet, forward_diffuse, interval_bounds

_CHUNK = 4096


def _mc_loss(model, x0, t, eps, sched, c, mode) -> np.ndarray:
    """Per-sample squared error of the noise prediction."""
    out = np.empty(x0.shape[0])
    for s in range(0, x0.shape[0], _CHUNK):
        sl = slice(s, s + _CHUNK)
        x_t = forward_diffuse(x0[sl], t[sl], eps[sl], sched)
        cc = None if c is None else c[sl]
        pred = model.forward(x_t, t[sl], cc, mode)
        out[sl] = np.sum((pred - eps[sl]) ** 2, axis=1)
    return out


def _draw(dataset: Dataset, rng, size):
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    x0, c = dataset.batch(rng, size)
    return x0, c


def per_interval_loss(
    model: DenoiserModel,
    dataset: Dataset,
    sched: NoiseSchedule,
    partition: IntervalPartition,
    mode: Mode = BASE,
    samples_per_interval: int = 1024,
    seed: int = 0,
) -> np.ndarray:
    """Monte-Carlo denoising loss restricted to each interval of ``partition``.

    Draws depend only on ``seed``, so different models or modes evaluated
    with the same seed see identical ``(x0, t, eps)``.
    """
    rng = make_rng(seed, "eval")
    out = np.empty(partition.n)
    for i in range(1, partition.n + 1):
        lo, hi = interval_bounds(i, partition.T, partition.n)
        x0, c = _draw(dataset, rng, samples_per_interval)
        t = rng.integers(lo, hi + 1, size=samples_per_interval)
        eps = rng.standard_normal(x0.shape)
        c = c if model.n_classes else None
        out[i - 1] = _mc_loss(model, x0, t, eps, sched, c, mode).mean()
    return out


def heldout_loss(
    model: DenoiserModel,
    dataset: Dataset,
    sched: NoiseSchedule,
    mode: Mode = BASE,
    n_samples: int = 8192,
    seed: int = 0,
    return_std: bool = False,
):
    """Denoising loss with ``t`` uniform on ``[1, T]`` (paired across models by seed).

    Shares its random stream with :func:`per_interval_loss`, so a one-interval
    partition with the same seed and sample count gives the same estimate.
    """
    rng = make_rng(seed, "eval")
    x0, c = _draw(dataset, rng, n_samples)
    t = rng.integers(1, sched.T + 1, size=n_samples)
    eps = rng.standard_normal(x0.shape)
    c = c if model.n_classes else None
    per = _mc_loss(model, x0, t, eps, sched, c, mode)
    if return_std:
        return float(per.mean()), float(per.std(ddof=1) / np.sqrt(n_samples))
    return float(per.mean())


def energy_distance(a, b) -> float:
    """``2 E|X-Y| - E|X-X'| - E|Y-Y'|`` with within-set means over distinct pairs."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("point sets must be non-empty")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    cross = cdist(a, b).mean()
    within_a = pdist(a).mean() if len(a) > 1 else 0.0
    within_b = pdist(b).mean() if len(b) > 1 else 0.0
    return float(max(2.0 * cross - within_a - within_b, 0.0))


def hidden_state_drift(
    model: DenoiserModel,
    probe_x0: np.ndarray,
    sched: NoiseSchedule,
    timesteps=None,
    seed: int = 0,
    mode: Mode = BASE,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean activation norm of the middle hidden layer for a probe batch at each ``t``.

    The probe is diffused with one fixed noise draw shared by all timesteps.
    """
    from .model import ForwardCache

    probe_x0 = np.atleast_2d(np.asarray(probe_x0, dtype=np.float64))
    ts = np.arange(1, sched.T + 1) if timesteps is None else np.asarray(timesteps, dtype=np.int64)
    rng = make_rng(seed, "drift")
    eps = rng.standard_normal(probe_x0.shape)
    block = len(model.hidden) // 2 + 1
    stats = np.empty(len(ts))
    for k, t in enumerate(ts):
        x_t = forward_diffuse(probe_x0, int(t), eps, sched)
        cache = ForwardCache()
        model.forward(x_t, int(t), None, mode, cache)
        stats[k] = np.linalg.norm(cache.hidden[block], axis=1).mean()
    return ts, stats


def coefficient_of_variation(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    mean = values.mean()
    return float(values.std() / abs(mean)) if mean else 0.0


def param_table(model: DenoiserModel) -> dict[str, int]:
    """Closed-form style accounting of base, expert and router tensors."""
    base = sum(model.params[n].size for n in model.base_names())
    table = {"base": base, "experts": model.adapter_param_count(), "routers": model.router_param_count()}
    if model.scales is not None:
        for n in model.scales:
            table[f"experts_n{n}"] = sum(model.params[k].size for k in model.expert_names(n))
    table["fostering_trainable"] = table["experts"]
    table["assembling_trainable"] = table["routers"]
    return table


def expected_adapter_params(model: DenoiserModel, rank: int, n_experts: int) -> int:
    return sum(n_experts * rank * (layer.d + layer.k) for layer in model.adapted_layers)


def expected_router_params(model: DenoiserModel, m: int) -> int:
    return sum((m - 1) * (layer.k + 1) + model.T * (m - 1) for layer in model.adapted_layers)


@dataclass
class ComparisonRow:
    name: str
    mode: str
    adapter_params: int
    trainable_params: int
    heldout_loss: float
    interval_loss: list[float]
    energy_distance: float | None = None


def compare_param_matched(
    base_model: DenoiserModel,
    train: Dataset,
    val: Dataset,
    sched: NoiseSchedule,
    n: int = 8,
    rank: int = 4,
    alpha: float = 4.0,
    foster=None,
    assemble=None,
    reference: np.ndarray | None = None,
    n_eval: int = 8192,
    n_generate: int = 2000,
    seed: int = 0,
) -> tuple[list[ComparisonRow], dict[str, DenoiserModel]]:
    """Vanilla LoRA of rank ``n * rank`` against ``n`` experts of rank ``rank``.

    ``foster`` and ``assemble`` are :class:`~tsexperts.training.TrainConfig`
    templates; scales, rank and alpha are overridden per row. Every expert
    and the vanilla adapter get ``foster.steps`` updates. With ``n > 1`` the
    expert bank uses scales ``(n, 1)`` and is also assembled.
    """
    from dataclasses import replace

    from .training import TrainConfig, train_assembling, train_fostering

    foster = foster or TrainConfig(stage="fostering", seed=seed)
    assemble = assemble or TrainConfig(stage="assembling", seed=seed)
    partition = IntervalPartition(sched.T, n)
    rows: list[ComparisonRow] = []
    models: dict[str, DenoiserModel] = {}

    def evaluate(name, model, mode, adapter_params, trainable):
        loss = heldout_loss(model, val, sched, mode, n_eval, seed=seed)
        intervals = per_interval_loss(model, val, sched, partition, mode, max(n_eval // n, 1), seed=seed)
        ed = None
        if reference is not None:
            res = sample(model, sched, SamplerConfig(steps=sched.T, mode=mode, seed=seed, batch=n_generate))
            ed = energy_distance(res.samples, reference)
        rows.append(ComparisonRow(name, str(mode), adapter_params, trainable, loss, intervals.tolist(), ed))
        models[name] = model

    vanilla = copy.deepcopy(base_model)
    v_scales = ScaleSet((1,))
    cfg = replace(foster, scales=v_scales, lora_rank=n * rank, lora_alpha=n * alpha)
    train_fostering(vanilla, train, sched, cfg)
    v_params = vanilla.adapter_param_count()
    evaluate(f"vanilla r={n * rank}", vanilla, Mode.fostering(1), v_params, v_params)

    tsm = copy.deepcopy(base_model)
    t_scales = ScaleSet((n, 1)) if n > 1 else ScaleSet((1,))
    cfg = replace(foster, scales=t_scales, lora_rank=rank, lora_alpha=alpha)
    train_fostering(tsm, train, sched, cfg)
    core_params = sum(tsm.params[k].size for k in tsm.expert_names(n))
    evaluate(f"tsm 1-stage n={n} r={rank}", tsm, Mode.fostering(n), core_params, core_params)

    if n > 1:
        tsm2 = copy.deepcopy(tsm)
        cfg = replace(assemble, scales=t_scales, lora_rank=rank, lora_alpha=alpha)
        train_assembling(tsm2, train, sched, cfg)
        evaluate(
            f"tsm 2-stage n=({n},1) r={rank}",
            tsm2,
            Mode.assembled(),
            tsm2.adapter_param_count(),
            tsm2.router_param_count(),
        )
    return rows, models
