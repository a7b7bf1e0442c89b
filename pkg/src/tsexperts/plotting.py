"""Figures written next to the CSV/JSON reports."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
    # keeps reruns byte-stable
    "svg.hashsalt": "tsexperts",
}


def size(scale: float = 1.0, aspect: float = 0.62) -> tuple[float, float]:
    width = 4.8 * scale
    return width, width * aspect


def new(scale: float = 1.0, nrows: int = 1, ncols: int = 1, aspect: float = 0.62):
    with plt.rc_context(RC):
        fig, ax = plt.subplots(nrows, ncols, figsize=size(scale, aspect))
    return fig, ax


def save(fig, path: str | Path) -> Path:
    path = Path(path)
    with plt.rc_context(RC):
        fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def _smooth(y: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(y) < window:
        return y
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


def loss_trace(losses, path, window: int = 50, title: str | None = None) -> Path:
    y = np.asarray(losses, dtype=float)
    fig, ax = new()
    ax.plot(np.arange(len(y)), y, lw=0.4, color="0.75", label="step")
    sm = _smooth(y, window)
    ax.plot(np.arange(len(sm)) + window - 1, sm, lw=1.2, color="C0", label=f"mean of {window}")
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("denoising loss")
    if title:
        ax.set_title(title)
    ax.legend(frameon=False)
    return save(fig, path)


def drift_profile(ts, values, path) -> Path:
    fig, ax = new()
    ax.plot(ts, values, color="C3", lw=1.2)
    ax.set_xlabel("timestep t")
    ax.set_ylabel("mean activation norm")
    ax.set_title("middle hidden layer")
    return save(fig, path)


def interval_losses(losses_by_name: dict, path) -> Path:
    fig, ax = new()
    for k, (name, vals) in enumerate(losses_by_name.items()):
        vals = np.asarray(vals, dtype=float)
        ax.plot(np.arange(1, len(vals) + 1), vals, marker="o", ms=3, lw=1, color=f"C{k}", label=name)
    ax.set_xlabel("interval")
    ax.set_ylabel("held-out loss")
    ax.legend(frameon=False)
    return save(fig, path)


def scatter_samples(samples, path, reference=None) -> Path:
    samples = np.asarray(samples)
    fig, ax = new(aspect=1.0)
    if reference is not None:
        ref = np.asarray(reference)
        ax.scatter(ref[:, 0], ref[:, 1], s=2, color="0.7", label="reference", rasterized=True)
    ax.scatter(samples[:, 0], samples[:, 1], s=2, color="C0", label="generated", rasterized=True)
    ax.set_aspect("equal")
    ax.legend(frameon=False, markerscale=4)
    return save(fig, path)


def raster_grid(samples, path, side: int = 8, ncols: int = 8) -> Path:
    imgs = np.asarray(samples)[: ncols * 2].reshape(-1, side, side)
    rows = int(np.ceil(len(imgs) / ncols))
    with plt.rc_context(RC):
        fig, axes = plt.subplots(rows, ncols, figsize=(ncols * 0.6, rows * 0.6))
    for ax, img in zip(np.ravel(axes), imgs):
        ax.imshow(img, cmap="gray", interpolation="nearest")
    for ax in np.ravel(axes):
        ax.axis("off")
    return save(fig, path)


def gate_trace(gate_rows, path) -> Path:
    """``gate_rows`` are ``(t, layer, gate_vector)`` tuples."""
    fig, ax = new()
    layers = sorted({layer for _, layer, _ in gate_rows})
    for k, layer in enumerate(layers):
        rows = [(t, g) for t, name, g in gate_rows if name == layer]
        ts = np.array([t for t, _ in rows])
        gs = np.array([np.atleast_1d(g) for _, g in rows])
        for j in range(gs.shape[1]):
            ax.plot(ts, gs[:, j], lw=1, color=f"C{k}", ls="-" if j == 0 else "--", label=f"{layer} g{j + 2}")
    ax.set_xlabel("timestep t")
    ax.set_ylabel("mean gate")
    ax.invert_xaxis()
    ax.legend(frameon=False)
    return save(fig, path)
