"""Run configuration files (JSON), validated before any compute starts."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError
from .schedule import ScaleSet
from .training import TrainConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", strict=True, frozen=True)


class ScheduleSpec(_Strict):
    T: int = Field(1000, ge=2)
    kind: Literal["linear", "cosine"] = "linear"
    beta_min: float = 1e-4
    beta_max: float = 2e-2


class ModelSpec(_Strict):
    width: int = Field(64, ge=2)
    depth: int = Field(3, ge=1)
    time_dim: int = Field(32, ge=2)
    adapt_io: bool = False
    conditional: bool = False


class DataSpec(_Strict):
    kind: Literal["gaussian_mixture", "checkerboard_blobs"] = "gaussian_mixture"
    n_train: int = Field(4096, ge=1)
    n_val: int = Field(4096, ge=1)
    modes: int = Field(8, ge=1)
    radius: float = 4.0
    sigma: float = 0.15
    rotation: float = 0.0

    def generator_kwargs(self) -> dict:
        if self.kind == "gaussian_mixture":
            return {"modes": self.modes, "radius": self.radius, "sigma": self.sigma, "rotation": self.rotation}
        return {}

    @property
    def dim(self) -> int:
        return 2 if self.kind == "gaussian_mixture" else 64

    @property
    def n_classes(self) -> int:
        return self.modes if self.kind == "gaussian_mixture" else 2


def _source_default() -> DataSpec:
    return DataSpec(radius=3.0, rotation=math.pi / 8)


class ExpertSpec(_Strict):
    scales: tuple[int, ...] = (8, 1)
    rank: int = Field(4, ge=1)
    alpha: float = 4.0

    @field_validator("scales")
    @classmethod
    def _valid_scales(cls, v):
        ScaleSet(v)
        return v


class StageSpec(_Strict):
    steps: int = Field(1000, ge=0)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(1e-3, ge=0)
    weight_decay: float = Field(1e-2, ge=0)
    betas: tuple[float, float] = (0.9, 0.999)

    @field_validator("betas")
    @classmethod
    def _valid_betas(cls, v):
        if not all(0 < b < 1 for b in v):
            raise ValueError("betas must lie in (0, 1)")
        return v


class FosterSpec(StageSpec):
    steps: int = Field(500, ge=0)
    dispatch: Literal["sequential", "joint"] = "sequential"


class BaseStageSpec(StageSpec):
    steps: int = Field(2000, ge=0)


class AssembleSpec(StageSpec):
    steps: int = Field(2000, ge=0)
    batch_size: int = Field(256, ge=1)
    lr: float = Field(1e-4, ge=0)


class SampleSpec(_Strict):
    n_samples: int = Field(2000, ge=1)
    mode: str = "assembled"
    variance: Literal["posterior", "beta"] = "posterior"
    label: int | None = None


class GradCheckSpec(_Strict):
    draws: int = Field(3, ge=0)
    batch: int = Field(4, ge=1)
    step: float = Field(1e-5, gt=0)
    tolerance: float = Field(1e-4, gt=0)


class EvalSpec(_Strict):
    n_heldout: int = Field(8192, ge=1)
    n_reference: int = Field(2000, ge=1)
    n_generate: int = Field(2000, ge=1)
    samples_per_interval: int = Field(1024, ge=1)
    drift_probe: int = Field(256, ge=1)
    drift_stride: int = Field(10, ge=1)
    grad_check: GradCheckSpec = GradCheckSpec()


class RunConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2**64)
    schedule: ScheduleSpec = ScheduleSpec()
    model: ModelSpec = ModelSpec()
    base_data: DataSpec = Field(default_factory=_source_default)
    data: DataSpec = DataSpec()
    experts: ExpertSpec = ExpertSpec()
    base: BaseStageSpec = BaseStageSpec()
    foster: FosterSpec = FosterSpec()
    assemble: AssembleSpec = AssembleSpec()
    sample: SampleSpec = SampleSpec()
    eval: EvalSpec = EvalSpec()
    out_dir: str | None = None
    checkpoint: str | None = None

    def train_config(self, stage: str) -> TrainConfig:
        spec = {"base": self.base, "fostering": self.foster, "assembling": self.assemble}[stage]
        return TrainConfig(
            stage=stage,
            scales=ScaleSet(self.experts.scales),
            lora_rank=self.experts.rank,
            lora_alpha=self.experts.alpha,
            steps=spec.steps,
            batch_size=spec.batch_size,
            lr=spec.lr,
            weight_decay=spec.weight_decay,
            betas=spec.betas,
            seed=self.seed,
            dispatch=getattr(spec, "dispatch", "sequential"),
        )

    def with_seed(self, seed: int | None) -> RunConfig:
        return self if seed is None else self.model_copy(update={"seed": seed})

    def snapshot(self) -> dict:
        return self.model_dump(mode="json")


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        return RunConfig.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise ConfigError(f"invalid config {path}:\n{exc}") from exc


def write_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.snapshot(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
