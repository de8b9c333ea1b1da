"""Declarative run configuration (YAML or JSON), schema-checked before any work starts."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .core import ADI_CATEGORIES
from .manifest import config_hash
from .model import ModelConfig
from .synthgen import DefectSizes, NoiseModel, SynthSpec
from .trainer import TrainConfig

OUTPUT_ROOT_ENV = "SRDEFECT_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Invalid or unreadable run configuration."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class NoiseSection(_Strict):
    kind: Literal["gaussian", "gamma", "none"] = "gaussian"
    sigma: float = Field(0.04, ge=0)
    shape: float = Field(2.0, gt=0)
    scale: float = Field(0.02, gt=0)


class SynthSection(_Strict):
    resolution: int = Field(256, ge=32)
    pitch_px: int = 16
    cd_px: int = 8
    line_polarity: Literal["bright_lines", "dark_lines"] = "bright_lines"
    edge_roughness_sigma: float = 0.5
    noise: NoiseSection = NoiseSection()
    base_line_level: float = 0.7
    base_space_level: float = 0.3
    categories: list[str] = list(ADI_CATEGORIES)
    defect_mix: dict[str, float] | None = None
    defects_per_image: tuple[int, int] = (1, 3)
    process_tag: str = "nominal"
    counts: dict[str, int] = {"train": 40, "val": 10}

    def to_spec(self, seed: int) -> SynthSpec:
        d = self.model_dump(exclude={"counts", "noise"})
        d["categories"] = tuple(d["categories"])
        d["defects_per_image"] = tuple(d["defects_per_image"])
        return SynthSpec(**d, noise=NoiseModel(**self.noise.model_dump()), sizes=DefectSizes(), seed=seed)


class AugmentSection(_Strict):
    targets: dict[str, int] = {}
    probability: float = Field(0.3, ge=0, le=1)


class ModelSection(_Strict):
    stage_channels: list[int] = [16, 32, 64, 128]
    neck_channels: int = Field(48, ge=1)
    sr_channels: list[int] = [32, 32, 16]
    sr_loss_weight: float = Field(1.0, ge=0)

    def to_config(self, input_size: int, num_categories: int, sr_enabled: bool) -> ModelConfig:
        return ModelConfig(stage_channels=tuple(self.stage_channels), neck_channels=self.neck_channels,
                           sr_channels=tuple(self.sr_channels), sr_loss_weight=self.sr_loss_weight,
                           input_size=input_size, num_categories=num_categories, sr_enabled=sr_enabled)


class TrainSection(_Strict):
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(2e-3, gt=0)
    warmup_steps: int = Field(50, ge=0)
    min_lr_ratio: float = Field(0.05, ge=0, le=1)
    weight_decay: float = Field(1e-4, ge=0)
    scales: list[int] | None = None
    eval_every: int = Field(0, ge=0)
    max_steps: int | None = Field(None, ge=1)
    flips: bool = False
    grad_clip: float = Field(10.0, ge=0)

    def to_config(self, seed: int, lam: float, **extra) -> TrainConfig:
        return TrainConfig(**self.model_dump(), seed=seed, sr_loss_weight=lam, **extra)


class EvalSection(_Strict):
    conf_thr: float = Field(0.001, ge=0, le=1)
    nms_thr: float = Field(0.5, gt=0, le=1)
    op_thr: float = Field(0.25, ge=0, le=1)
    split: str | None = "val"
    zero_shot_thresholds: list[float] = [0.1, 0.2, 0.3, 0.5]
    throughput_resolutions: list[int] = [1024, 512, 256, 128]
    # (side, seconds) imaging-time measurements the linear time model is fitted to
    time_points: list[tuple[float, float]] = [(512, 1.0), (1024, 2.0)]


class RunConfig(_Strict):
    seed: int = 0
    output_root: str = "runs"
    chain: list[int] = [256, 128]
    synth: SynthSection = SynthSection()
    augment: AugmentSection = AugmentSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    eval: EvalSection = EvalSection()

    @field_validator("chain")
    @classmethod
    def _halving(cls, v):
        if len(v) < 1 or any(a != 2 * b for a, b in zip(v, v[1:])):
            raise ValueError(f"chain must halve at every step, got {v}")
        return v

    def with_seed(self, seed: int | None) -> "RunConfig":
        return self if seed is None else self.model_copy(update={"seed": seed})

    def resolved_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV) or self.output_root)

    def hash(self) -> str:
        return config_hash(self.model_dump(mode="json"))


def load_config(path: str | Path | None) -> RunConfig:
    """Parse and validate a config file; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        doc = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    try:
        return RunConfig.model_validate(doc or {})
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = ".".join(str(p) for p in first["loc"])
        raise ConfigError(f"{path}: {loc}: {first['msg']}") from exc
