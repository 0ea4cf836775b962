"""Run configuration: one validated tree for datasets, model, diffusion, training, sampling and eval.

Values resolve in three layers. Defaults are overridden by a JSON file, which is in turn
overridden by environment variables of the form ``MP__SECTION__KEY``::

    MP__TRAIN__STEPS=200 MP__SAMPLE__ROLL=true matstack generate ...
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Literal, Optional, Tuple, Type, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, PydanticBaseSettingsSource, SettingsConfigDict

from .errors import ConfigurationError
from .material_maps import FrameMode
from .procedural_materials import FAMILIES

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetConfig(_Section):
    count: int = Field(default=2000, ge=1)
    resolution: int = Field(default=64, ge=16)
    val_fraction: float = Field(default=0.05, ge=0.0, le=0.5)
    test_fraction: float = Field(default=0.05, ge=0.0, le=0.5)
    families: Tuple[str, ...] = FAMILIES
    max_occluders: int = Field(default=2, ge=0)
    distortion_severity: float = Field(default=0.5, ge=0.0, le=1.0)
    max_resamples: int = Field(default=50, ge=1)
    workers: int = Field(default=1, ge=1)
    seed: int = 0

    @field_validator("families")
    @classmethod
    def _known_families(cls, value: Tuple[str, ...]) -> Tuple[str, ...]:
        unknown = [f for f in value if f not in FAMILIES]
        if unknown or not value:
            raise ValueError(f"Unknown or empty material families: {unknown}")
        return value


class ModelConfig(_Section):
    """Shape of the denoiser; the parameter count is a pure function of these fields."""

    patch_size: int = Field(default=8, ge=1)
    embed_dim: int = Field(default=64, ge=8)
    depth: int = Field(default=4, ge=1)
    heads: int = Field(default=4, ge=1)
    text_vocab_size: int = Field(default=4096, ge=1)
    text_slots: int = Field(default=8, ge=1)
    max_frames: int = Field(default=7, ge=7)
    resolution: int = Field(default=32, ge=1)
    mlp_ratio: float = Field(default=4.0, gt=0.0)
    codec: Literal["identity"] = "identity"

    @model_validator(mode="after")
    def _consistent_shapes(self) -> "ModelConfig":
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        if self.embed_dim % 8:
            raise ValueError(f"embed_dim {self.embed_dim} must be a multiple of 8")
        if self.resolution % self.patch_size:
            raise ValueError(
                f"resolution {self.resolution} is not divisible by patch_size {self.patch_size}"
            )
        return self


class DiffusionConfig(_Section):
    schedule: Literal["cosine", "linear"] = "cosine"
    num_timesteps: int = Field(default=1000, ge=2)


class TrainConfig(_Section):
    batch_size: int = Field(default=8, ge=1)
    lr: float = Field(default=1e-4, gt=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = Field(default=0.0, ge=0.0)
    steps: int = Field(default=2000, ge=1)
    max_grad_norm: float = Field(default=1.0, gt=0.0)
    checkpoint_every: int = Field(default=500, ge=1)
    log_every: int = Field(default=10, ge=1)
    deterministic: bool = True
    num_threads: int = Field(default=1, ge=1)
    seed: int = 0
    mask_input_ablation: bool = False


class SamplerConfig(_Section):
    steps: int = Field(default=50, ge=1)
    eta: float = Field(default=0.0, ge=0.0, le=1.0)
    roll: bool = False
    roll_max_offset: Optional[int] = Field(default=None, ge=1)
    guidance: Literal["none"] = "none"
    seed: int = 0
    mode: FrameMode = FrameMode.IMAGE_COND
    prompt: str = ""
    image_path: Optional[str] = None


class EvalConfig(_Section):
    embedder: str = "builtin"
    dimension: int = Field(default=148, ge=1)
    timeout: float = Field(default=10.0, gt=0.0)
    max_workers: int = Field(default=4, ge=1)
    rig: Literal["studio", "ambient"] = "studio"
    seed: int = 0


class RunConfig(BaseSettings):
    """Top-level configuration; unknown keys are rejected at every level."""

    model_config = SettingsConfigDict(
        env_prefix="MP__",
        env_nested_delimiter="__",
        extra="forbid",
        frozen=True,
    )

    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    sample: SamplerConfig = Field(default_factory=SamplerConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        # environment wins over values passed in (which come from the JSON file)
        return env_settings, init_settings

    @classmethod
    def from_json_file(cls, path: PathLike) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config file {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError(f"Config file {path} must hold a JSON object")
        return cls.from_mapping(data)

    @classmethod
    def from_mapping(cls, data: dict) -> "RunConfig":
        try:
            return cls(**data)
        except ValidationError as e:
            raise ConfigurationError(f"Invalid configuration: {e}") from e

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)

    def dump_json(self, path: PathLike) -> Path:
        """Write the fully resolved config; reloading it yields an equal value."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")
        logger.debug(f"Wrote effective config to {path}")
        return path


def load_run_config(path: Optional[PathLike] = None) -> RunConfig:
    """Resolve defaults, an optional JSON file and MP__ environment overrides."""
    if path is None:
        return RunConfig.from_mapping({})
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Config file {path} does not exist")
    config = RunConfig.from_json_file(path)
    logger.info(f"Loaded configuration from {path}")
    return config
