"""Command-line entry point.

Exit codes: 0 ok, 1 failed check, 2 usage or config error, 3 divergence or
invariant violation during training, 4 checkpoint stage mismatch.
"""

from __future__ import annotations

import argparse
import copy
import logging
import sys
from pathlib import Path

import numpy as np

from . import plotting, reports
from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .config import RunConfig, load_config
from .data import make_dataset, make_rng, rng_state
from .errors import ConfigError, DivergenceError, InvariantViolation, StageMismatch
from .evaluate import (
    coefficient_of_variation,
    energy_distance,
    heldout_loss,
    hidden_state_drift,
    param_table,
    per_interval_loss,
)
from .gradcheck import assembling_error, base_error, fostering_error, randomize
from .model import DenoiserModel, Mode
from .sampling import SamplerConfig, sample
from .schedule import IntervalPartition, interval_bounds, make_schedule
from .training import train_assembling, train_base, train_fostering

log = logging.getLogger("tsexperts")

EXIT_OK, EXIT_FAILED, EXIT_USAGE, EXIT_DIVERGED, EXIT_STAGE = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


def _schedule(cfg: RunConfig):
    s = cfg.schedule
    return make_schedule(s.T, s.kind, s.beta_min, s.beta_max)


def _datasets(cfg: RunConfig, spec, prefix: str):
    kw = spec.generator_kwargs()
    train = make_dataset(spec.kind, spec.n_train, make_rng(cfg.seed, f"{prefix}-train"), **kw)
    val = make_dataset(spec.kind, spec.n_val, make_rng(cfg.seed, f"{prefix}-val"), **kw)
    return train, val


def _reference(cfg: RunConfig):
    spec = cfg.data
    return make_dataset(spec.kind, cfg.eval.n_reference, make_rng(cfg.seed, "reference"), **spec.generator_kwargs())


def _out_dir(args, cfg: RunConfig) -> Path:
    out = args.out or cfg.out_dir
    if not out:
        raise UsageError("no output directory: pass --out or set out_dir in the config")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _ckpt_path(args, cfg: RunConfig) -> Path:
    path = args.ckpt or cfg.checkpoint
    if not path:
        raise UsageError("this command needs --ckpt")
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise UsageError(f"no checkpoint at {path}")
    return path


def _require_stage(manifest: dict, allowed: tuple[str, ...], what: str) -> None:
    if manifest["stage"] not in allowed:
        raise StageMismatch(f"{what} needs a checkpoint at stage {' or '.join(allowed)}, got {manifest['stage']!r}")


def _mode_for(args, cfg: RunConfig, manifest: dict) -> Mode:
    text = getattr(args, "mode", None) or cfg.sample.mode
    try:
        mode = Mode.parse(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    stage = manifest["stage"]
    if mode.kind == "assembled":
        scales = (manifest["experts"] or {}).get("scales", [])
        if stage != "assembling" and not (stage == "fostering" and len(scales) == 1):
            raise StageMismatch(f"assembled mode needs an assembled checkpoint, got {stage!r}")
    elif mode.kind == "fostering":
        if stage not in ("fostering", "assembling"):
            raise StageMismatch(f"mode {mode} needs fostered experts, checkpoint stage is {stage!r}")
        if mode.scale not in manifest["experts"]["scales"]:
            raise StageMismatch(f"checkpoint has no experts at scale {mode.scale}")
    return mode


def _finish_training(out: Path, model, stage, cfg, rng, report, title):
    ckpt = save_checkpoint(model, out / "checkpoint", stage, cfg.snapshot(), rng_state(rng))
    reports.write_train_report(out, report)
    if report.trace:
        plotting.loss_trace(report.losses, out / "train_loss.png", title=title)
    log.info("wrote %s", ckpt)


def cmd_train_base(args, cfg: RunConfig) -> int:
    out = _out_dir(args, cfg)
    sched = _schedule(cfg)
    train, val = _datasets(cfg, cfg.base_data, "base-data")
    m = cfg.model
    model = DenoiserModel(
        data_dim=cfg.base_data.dim,
        width=m.width,
        depth=m.depth,
        time_dim=m.time_dim,
        n_classes=cfg.base_data.n_classes if m.conditional else 0,
        T=sched.T,
        adapt_io=m.adapt_io,
        rng=make_rng(cfg.seed, "init"),
    )
    rng = make_rng(cfg.seed, "train-base")
    report = train_base(model, train, sched, cfg.train_config("base"), val=val, rng=rng)
    _finish_training(out, model, "base", cfg, rng, report, "base pre-training")
    return EXIT_OK


def cmd_train_foster(args, cfg: RunConfig) -> int:
    path = _ckpt_path(args, cfg)
    manifest = read_manifest(path)
    _require_stage(manifest, ("base",), "train-foster")
    out = _out_dir(args, cfg)
    model, _ = load_checkpoint(path)
    if model.T != cfg.schedule.T:
        raise UsageError(f"config T={cfg.schedule.T} does not match checkpoint T={model.T}")
    sched = _schedule(cfg)
    train, val = _datasets(cfg, cfg.data, "data")
    rng = make_rng(cfg.seed, "train-fostering")
    report = train_fostering(model, train, sched, cfg.train_config("fostering"), val=val, rng=rng)
    _finish_training(out, model, "fostering", cfg, rng, report, "expert fitting")
    return EXIT_OK


def cmd_assemble(args, cfg: RunConfig) -> int:
    path = _ckpt_path(args, cfg)
    manifest = read_manifest(path)
    _require_stage(manifest, ("fostering",), "assemble")
    have = set(manifest["experts"]["scales"])
    missing = [n for n in cfg.experts.scales if n not in have]
    if missing:
        raise StageMismatch(f"checkpoint has no experts for scales {missing}")
    out = _out_dir(args, cfg)
    model, _ = load_checkpoint(path)
    sched = _schedule(cfg)
    train, val = _datasets(cfg, cfg.data, "data")
    rng = make_rng(cfg.seed, "train-assembling")
    report = train_assembling(model, train, sched, cfg.train_config("assembling"), val=val, rng=rng)
    _finish_training(out, model, "assembling", cfg, rng, report, "router training")
    return EXIT_OK


def cmd_sample(args, cfg: RunConfig) -> int:
    path = _ckpt_path(args, cfg)
    model, manifest = load_checkpoint(path)
    mode = _mode_for(args, cfg, manifest)
    out = _out_dir(args, cfg)
    sched = _schedule(cfg)
    sc = SamplerConfig(steps=sched.T, mode=mode, seed=cfg.seed, batch=cfg.sample.n_samples, variance=cfg.sample.variance)
    result = sample(model, sched, sc, c=cfg.sample.label)
    reports.write_samples(out, result.samples)
    if mode.kind == "fostering":
        reports.write_expert_log(out, result.expert_log, (mode.scale,))
    elif mode.kind == "assembled":
        reports.write_expert_log(out, result.expert_log, model.scales.scales)
    if result.gate_log:
        reports.write_gate_log(out, result.gate_log)
        plotting.gate_trace(result.gate_log, out / "gates.png")
    if model.data_dim == 2:
        plotting.scatter_samples(result.samples, out / "samples.png", _reference(cfg).x)
    else:
        plotting.raster_grid(result.samples, out / "samples.png")
    reports.write_json(out / "sample_summary.json", {"mode": str(mode), "n": len(result.samples), "switch_events": result.switch_events})
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    path = _ckpt_path(args, cfg)
    model, manifest = load_checkpoint(path)
    mode = _mode_for(args, cfg, manifest)
    out = _out_dir(args, cfg)
    sched = _schedule(cfg)
    ev = cfg.eval
    _, val = _datasets(cfg, cfg.data, "data")
    n = model.scales.core if model.scales is not None else 1
    partition = IntervalPartition(sched.T, n)
    intervals = per_interval_loss(model, val, sched, partition, mode, ev.samples_per_interval, cfg.seed)
    loss, stderr = heldout_loss(model, val, sched, mode, ev.n_heldout, cfg.seed, return_std=True)
    reference = _reference(cfg).x
    generated = sample(model, sched, SamplerConfig(steps=sched.T, mode=mode, seed=cfg.seed, batch=ev.n_generate)).samples
    ed = energy_distance(generated, reference)
    probe = val.x[: ev.drift_probe]
    ts, drift = hidden_state_drift(model, probe, sched, np.arange(1, sched.T + 1, ev.drift_stride), cfg.seed, mode)
    params = param_table(model)

    reports.write_csv(
        out / "interval_loss.csv",
        ["interval", "t_lo", "t_hi", "loss"],
        ([i, *interval_bounds(i, sched.T, n), v] for i, v in enumerate(intervals, 1)),
    )
    reports.write_csv(out / "drift.csv", ["t", "mean_activation_norm"], zip(ts.tolist(), drift.tolist()))
    reports.write_csv(out / "params.csv", ["group", "count"], params.items())
    reports.write_json(
        out / "eval.json",
        {
            "stage": manifest["stage"],
            "mode": str(mode),
            "interval_loss": intervals,
            "heldout_loss": loss,
            "heldout_loss_stderr": stderr,
            "energy_distance": ed,
            "drift_cv": coefficient_of_variation(drift),
            "params": params,
        },
    )
    plotting.interval_losses({str(mode): intervals}, out / "interval_loss.png")
    plotting.drift_profile(ts, drift, out / "drift.png")
    if model.data_dim == 2:
        plotting.scatter_samples(generated, out / "samples.png", reference)
    return EXIT_OK


def cmd_grad_check(args, cfg: RunConfig) -> int:
    path = _ckpt_path(args, cfg)
    model, manifest = load_checkpoint(path)
    out = _out_dir(args, cfg)
    sched = _schedule(cfg)
    gc = cfg.eval.grad_check
    train, _ = _datasets(cfg, cfg.data, "data")
    rng = make_rng(cfg.seed, "grad-check")
    stage = manifest["stage"]
    checks = {
        "base": [("base", base_error)],
        "fostering": [("fostering", fostering_error)],
        "assembling": [("fostering", fostering_error), ("assembling", assembling_error)],
    }[stage]
    if stage == "assembling" and not model.router_names():
        checks = checks[:1]
    errors: dict[str, list[float]] = {name: [] for name, _ in checks}
    for draw in range(gc.draws + 1):
        m = model
        if draw:
            m = copy.deepcopy(model)
            randomize(m, rng)
        for name, fn in checks:
            errors[name].append(fn(m, train, sched, rng, gc.batch, gc.step))
    worst = max(max(v) for v in errors.values())
    passed = worst < gc.tolerance
    reports.write_json(
        out / "grad_check.json",
        {"stage": stage, "errors": errors, "max_relative_error": worst, "tolerance": gc.tolerance, "passed": passed},
    )
    print(f"grad-check {stage}: max relative error {worst:.3e} ({'ok' if passed else 'FAILED'})")
    return EXIT_OK if passed else EXIT_FAILED


COMMANDS = {
    "train-base": cmd_train_base,
    "train-foster": cmd_train_foster,
    "assemble": cmd_assemble,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsexperts", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config (JSON)")
        p.add_argument("--ckpt", help="input checkpoint directory")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        if name in ("sample", "eval"):
            p.add_argument("--mode", help="base, fostering:<n> or assembled")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise UsageError("--seed must be an unsigned 64-bit integer")
            cfg = cfg.with_seed(args.seed)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageMismatch as exc:
        print(f"stage mismatch: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (DivergenceError, InvariantViolation) as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
