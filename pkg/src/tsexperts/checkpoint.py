"""Checkpoint directories: ``manifest.json`` plus a raw float64 tensor blob.

The blob holds every tensor back to back, little-endian float64, row-major,
in parameter-store order. The manifest records each tensor's name, shape,
byte offset and byte length, the model structure, the stage tag, a config
snapshot and the RNG state, serialised with sorted keys so that equal
checkpoints are equal byte for byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import make_rng
from .errors import ShapeError
from .model import DenoiserModel
from .schedule import ScaleSet

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"
STAGES = ("base", "fostering", "assembling")
_DTYPE = np.dtype("<f8")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def save_checkpoint(
    model: DenoiserModel,
    path: str | Path,
    stage: str,
    config: dict | None = None,
    rng_state: dict | None = None,
) -> Path:
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    chunks = []
    for name, arr in model.params.tensors.items():
        data = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes(order="C")
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        offset += len(data)
        chunks.append(data)
    experts = None
    if model.scales is not None:
        experts = {"scales": list(model.scales.scales), "rank": model.lora_rank, "alpha": model.lora_alpha}
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "stage": stage,
        "architecture": model.architecture(),
        "experts": experts,
        "routers": model.has_routers,
        "tensors": index,
        "blob_bytes": offset,
        "config": config,
        "rng_state": rng_state,
    }
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text(_dumps(manifest), encoding="utf-8")
    return path


def read_manifest(path: str | Path) -> dict:
    path = Path(path)
    mf = path / MANIFEST
    if not mf.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {mf}")
    manifest = json.loads(mf.read_text(encoding="utf-8"))
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported checkpoint schema {manifest.get('schema_version')!r}")
    return manifest


def load_checkpoint(path: str | Path) -> tuple[DenoiserModel, dict]:
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / BLOB).read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise ShapeError(f"blob has {len(blob)} bytes, manifest expects {manifest['blob_bytes']}")
    arch = manifest["architecture"]
    # init values are overwritten below; any generator will do
    model = DenoiserModel(**arch, rng=make_rng(0, "checkpoint-skeleton"))
    if manifest["experts"]:
        e = manifest["experts"]
        model.attach_experts(ScaleSet(tuple(e["scales"])), e["rank"], e["alpha"], make_rng(0, "checkpoint-skeleton"))
        if manifest["routers"]:
            model.attach_routers()
    expected = set(model.params.tensors)
    seen = set()
    total = 0
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in expected:
            raise ShapeError(f"unexpected tensor {name!r} in checkpoint")
        shape = tuple(entry["shape"])
        target = model.params[name]
        if shape != target.shape:
            raise ShapeError(f"tensor {name!r} has shape {shape}, model expects {target.shape}")
        n = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if entry["nbytes"] != n:
            raise ShapeError(f"tensor {name!r}: {entry['nbytes']} bytes for shape {shape}")
        start = entry["offset"]
        target[...] = np.frombuffer(blob, dtype=_DTYPE, count=n // 8, offset=start).reshape(shape)
        seen.add(name)
        total += n
    if seen != expected:
        raise ShapeError(f"checkpoint is missing tensors: {sorted(expected - seen)[:5]}")
    if total != len(blob):
        raise ShapeError("manifest does not cover the whole blob")
    model.params.freeze_all()
    return model, manifest


def tensor_bytes(path: str | Path, names=None) -> dict[str, bytes]:
    """Raw bytes per tensor straight from the blob, for frozen-tensor audits."""
    path = Path(path)
    manifest = read_manifest(path)
    blob = (path / BLOB).read_bytes()
    out = {}
    for e in manifest["tensors"]:
        if names is None or e["name"] in names:
            out[e["name"]] = blob[e["offset"] : e["offset"] + e["nbytes"]]
    return out
