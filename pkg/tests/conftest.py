import numpy as np
import pytest

from tsexperts.data import gaussian_mixture, make_rng
from tsexperts.model import DenoiserModel
from tsexperts.schedule import ScaleSet, make_schedule

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def sched():
    return make_schedule(1000)


@pytest.fixture
def model():
    return DenoiserModel(rng=make_rng(0, "init"))


def randomize_all(model, rng, scale=0.3):
    for arr in model.params.tensors.values():
        arr[...] = rng.normal(0.0, scale, size=arr.shape)


@pytest.fixture
def expert_model():
    m = DenoiserModel(rng=make_rng(0, "init"))
    m.attach_experts(ScaleSet((8, 1)), 4, 4.0, make_rng(0, "lora"))
    m.attach_routers()
    return m


@pytest.fixture(scope="session")
def mixture():
    return gaussian_mixture(2048, make_rng(0, "mixture"))


SMALL_CONFIG = {
    "seed": 3,
    "schedule": {"T": 100},
    "base": {"steps": 200},
    "experts": {"scales": [4, 1]},
    "foster": {"steps": 30},
    "assemble": {"steps": 60, "lr": 1e-3},
    "sample": {"n_samples": 200},
    "eval": {
        "n_generate": 300,
        "n_reference": 300,
        "n_heldout": 1024,
        "samples_per_interval": 128,
        "drift_probe": 32,
        "drift_stride": 5,
        "grad_check": {"draws": 1},
    },
}


def write_json(path, obj):
    import json

    path.write_text(json.dumps(obj))
    return path


def run_cli_pipeline(root, config=None):
    """train-base, train-foster, assemble and sample into ``root``; returns the stage dirs."""
    from tsexperts.cli import main

    root.mkdir(parents=True, exist_ok=True)
    cfg = write_json(root / "cfg.json", config or SMALL_CONFIG)
    dirs = {k: root / k for k in ("base", "foster", "assemble", "sample")}
    assert main(["train-base", "--config", str(cfg), "--out", str(dirs["base"])]) == 0
    assert main(["train-foster", "--config", str(cfg), "--ckpt", str(dirs["base"] / "checkpoint"), "--out", str(dirs["foster"])]) == 0
    assert main(["assemble", "--config", str(cfg), "--ckpt", str(dirs["foster"] / "checkpoint"), "--out", str(dirs["assemble"])]) == 0
    assert main(["sample", "--config", str(cfg), "--ckpt", str(dirs["assemble"] / "checkpoint"), "--out", str(dirs["sample"])]) == 0
    return cfg, dirs
