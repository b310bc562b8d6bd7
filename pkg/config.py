"""
Run configuration for egoflow.

Values resolve in three layers: the JSON config file (or model defaults),
then environment variables (loaded from .env), then command-line flags.
"""

import json
import logging
import os
from pathlib import Path
from typing import List, Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ConfigurationError
from metrics import ComplianceRules

logger = logging.getLogger(__name__)

RESOLVED_CONFIG_NAME = "resolved_config.json"


class RigConfig(BaseModel):
    """Panoramic rig: N identical camera planes on a regular polygon."""

    model_config = ConfigDict(extra="forbid")

    num_cameras: int = Field(6, ge=3)
    width: int = Field(64, ge=1)
    height: int = Field(8, ge=1)
    channels: int = Field(16, ge=1)
    levels: List[int] = Field(default_factory=lambda: [8, 4, 2, 1])

    @model_validator(mode="after")
    def check_levels(self):
        if not self.levels:
            raise ValueError("at least one partition level is required")
        perimeter = self.num_cameras * self.width
        for size in self.levels:
            if size < 1 or perimeter % (2 * size) != 0:
                raise ValueError(f"level size {size} does not split a {perimeter}-column ring into two equal sides")
        return self


class PathConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    type: Literal["straight", "arc"] = "arc"
    speed: float = Field(4.0, ge=0.0)
    r: float = Field(10.0, gt=0.0)
    direction: Literal["left", "right"] = "right"


class ScenarioConfig(BaseModel):
    """Synthetic world description; the seed determines every generated value."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    path: PathConfig = Field(default_factory=PathConfig)
    horizon: int = Field(8, ge=2, alias="T")
    seed: int = 42
    rig: RigConfig = Field(default_factory=RigConfig)
    frame_interval: float = Field(0.5, gt=0.0)
    pixels_per_meter: float = Field(4.0, gt=0.0)
    ego_width: float = Field(2.0, gt=0.0)
    texture_frequency: float = Field(0.25, gt=0.0, le=1.0)
    num_objects: int = Field(4, ge=0)
    object_width: int = Field(3, ge=1)
    planner_error: float = Field(2.0, ge=0.0)
    planner_decay: float = Field(0.6, ge=0.0, le=1.0)


class FlowModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    levels: List[int] = Field(default_factory=lambda: [0])
    aggregation_range: int = Field(3, ge=1)
    latent_channels: Optional[int] = None
    attention_residual: bool = False
    share_state_heads: bool = False
    decoupled: bool = True
    size_power: Literal["linear", "quadratic", "cubic"] = "quadratic"

    @field_validator("levels")
    @classmethod
    def check_model_levels(cls, levels: List[int]) -> List[int]:
        if not levels:
            raise ValueError("at least one model level is required")
        if min(levels) < 0 or len(set(levels)) != len(levels):
            raise ValueError(f"model levels must be distinct non-negative indices, got {levels}")
        return levels

    @field_validator("aggregation_range")
    @classmethod
    def check_range(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("aggregation_range must be odd")
        return value

    @property
    def primary_level(self) -> int:
        return self.levels[0]

    def latent_width(self, channels: int) -> int:
        return self.latent_channels or max(1, channels // 2)


class TrainingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(2000, ge=0)
    lr: float = Field(0.01, ge=0.0)
    optimizer: Literal["sgd", "adam"] = "adam"
    seed: int = 42
    lambda_spat: float = Field(1.0, ge=0.0)
    lambda_tem: float = Field(1.0, ge=0.0)
    log_every: int = Field(100, ge=1)


class MetricConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    thresholds: List[float] = Field(default_factory=lambda: [0.25, 0.5, 0.75])
    q_values: List[int] = Field(default_factory=lambda: [1, 2, 3])
    horizons: List[int] = Field(default_factory=lambda: [1, 2, 3])
    compliance: ComplianceRules = Field(default_factory=ComplianceRules)


class LocalizationConfig(BaseModel):
    """Toy object-localization experiment on a small rig."""

    model_config = ConfigDict(extra="forbid")

    kind: Literal["separable", "flow_only", "null"] = "flow_only"
    rig: RigConfig = Field(default_factory=lambda: RigConfig(num_cameras=4, width=16, height=2, channels=16, levels=[4]))
    num_objects: int = 200
    num_frames: int = Field(4, ge=1)
    noise: float = Field(0.1, ge=0.0)
    epochs: int = Field(150, ge=1)
    lr: float = Field(0.05, gt=0.0)
    train_fraction: float = Field(0.75, gt=0.0, lt=1.0)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])


class RunConfig(BaseModel):
    """Merged view of every setting a subcommand may read."""

    model_config = ConfigDict(extra="forbid")

    scenario: ScenarioConfig = Field(default_factory=ScenarioConfig)
    model: FlowModelConfig = Field(default_factory=FlowModelConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    metrics: MetricConfig = Field(default_factory=MetricConfig)
    localization: LocalizationConfig = Field(default_factory=LocalizationConfig)
    out_dir: str = "runs"

    @property
    def rig(self) -> RigConfig:
        return self.scenario.rig

    @model_validator(mode="after")
    def check_level(self):
        if max(self.model.levels) >= len(self.scenario.rig.levels):
            raise ValueError(f"model levels {self.model.levels} but the rig defines {len(self.scenario.rig.levels)} levels")
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        data = self.model_dump(by_alias=True)
        data["scenario"]["seed"] = seed
        data["training"]["seed"] = seed
        return RunConfig.model_validate(data)

    def to_json(self) -> str:
        return json.dumps(self.model_dump(by_alias=True), indent=2, sort_keys=True)


def load_run_config(path: Optional[str] = None) -> RunConfig:
    """Read a RunConfig from JSON; a missing path yields the defaults."""
    if path is None:
        return RunConfig()
    config_path = Path(path)
    try:
        data = json.loads(config_path.read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {config_path}") from None
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file {config_path} is not valid JSON: {e}") from e
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"config file {config_path} is invalid: {e}") from e


def resolve_run_config(path: Optional[str] = None, seed: Optional[int] = None, out_dir: Optional[str] = None) -> RunConfig:
    """File, then environment (EGOFLOW_SEED, EGOFLOW_OUT_DIR), then flags."""
    load_dotenv()
    config = load_run_config(path)

    env_seed = os.getenv("EGOFLOW_SEED")
    if env_seed is not None:
        try:
            config = config.with_seed(int(env_seed))
        except ValueError:
            raise ConfigurationError(f"EGOFLOW_SEED must be an integer, got '{env_seed}'") from None
    env_out = os.getenv("EGOFLOW_OUT_DIR")
    if env_out:
        config = config.model_copy(update={"out_dir": env_out})

    if seed is not None:
        config = config.with_seed(seed)
    if out_dir is not None:
        config = config.model_copy(update={"out_dir": out_dir})

    logger.debug(f"Resolved run config: {config.to_json()}")
    return config


def write_resolved_config(config: RunConfig, directory: Path) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    target = directory / RESOLVED_CONFIG_NAME
    target.write_text(config.to_json())
    return target
