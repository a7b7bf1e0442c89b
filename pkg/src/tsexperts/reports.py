"""CSV and JSON writers for training, sampling and evaluation outputs."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_csv(path: str | Path, header: list[str], rows) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)  # RFC 4180: CRLF rows, minimal quoting
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_plain(obj), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_train_report(out: Path, report) -> None:
    write_csv(out / "train_loss.csv", ["step", "unit", "loss"], ((k, u, l) for k, (u, _, l) in enumerate(report.trace)))
    write_json(out / "train_summary.json", report.summary())
    # wall-clock lives apart from the deterministic outputs
    write_json(out / "timing.json", {"wall_clock_seconds": report.wall_clock})


def write_samples(out: Path, samples: np.ndarray) -> Path:
    header = [f"x{k}" for k in range(samples.shape[1])]
    return write_csv(out / "samples.csv", header, samples.tolist())


def write_expert_log(out: Path, expert_log, scales) -> Path:
    header = ["t"] + [f"interval_n{n}" for n in scales]
    return write_csv(out / "experts.csv", header, ([t, *active] for t, active in expert_log))


def write_gate_log(out: Path, gate_log) -> Path:
    width = max((len(np.atleast_1d(g)) for _, _, g in gate_log), default=0)
    header = ["t", "layer"] + [f"g{j + 2}" for j in range(width)]
    return write_csv(out / "gates.csv", header, ([t, layer, *np.atleast_1d(g).tolist()] for t, layer, g in gate_log))
