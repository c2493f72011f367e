"""
Configuration loader with lazy loading and caching.

Loads JSON configuration files from SHARED/config/ directory.
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError
from .models import KinematicMode


# Config Models
class SimulationConfig(BaseModel):
    """Time grid and windowing defaults"""
    dt: float = Field(default=0.1, gt=0)
    t_obs: int = Field(default=10, ge=1)
    horizon: int = Field(default=40, ge=2)
    stride: int = Field(default=10, ge=1)

    @model_validator(mode="after")
    def validate_window(self) -> "SimulationConfig":
        if self.t_obs >= self.horizon:
            raise ValueError("t_obs must be smaller than horizon")
        return self


class BirdviewConfig(BaseModel):
    """Ego-centric birdview rendering parameters"""
    model_config = ConfigDict(frozen=True)

    resolution_px: int = Field(default=256, gt=0)
    extent_m: float = Field(default=100.0, gt=0)
    sigma_blend: float = Field(default=1e-4, gt=0)
    gamma_blend: float = Field(default=1e-2, gt=0)
    eps_bg: float = 1e-3

    @property
    def pixel_m(self) -> float:
        """Meters covered by one pixel"""
        return self.extent_m / self.resolution_px


class RolloutDefaults(BaseModel):
    """Defaults for the rollout subcommand"""
    k_samples: int = Field(default=6, ge=1)
    mode: str = "generative"
    noise_on_states: bool = False


class LoggingConfig(BaseModel):
    """Logging configuration"""
    level: str = "INFO"
    log_dir: str = "SHARED/logs"

    @field_validator("level")
    @classmethod
    def validate_level(cls, v: str) -> str:
        v = v.upper()
        if v not in ("DEBUG", "INFO", "WARNING", "ERROR"):
            raise ValueError(f"unknown log level {v!r}")
        return v


class SystemConfig(BaseModel):
    """System-wide configuration"""
    config_version: str = "diffdrive.v1"
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    birdview: BirdviewConfig = Field(default_factory=BirdviewConfig)
    rollout: RolloutDefaults = Field(default_factory=RolloutDefaults)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)


class AgentModelConfig(BaseModel):
    """Driver network architecture and likelihood settings"""
    model_config = ConfigDict(frozen=True)

    hidden_dim: int = Field(default=64, gt=0)
    num_layers: int = Field(default=2, gt=0)
    latent_dim: int = Field(default=2, gt=0)
    birdview_resolution: int = Field(default=64, gt=0)
    extent_m: float = Field(default=100.0, gt=0)
    encoder_channels: List[int] = Field(default_factory=lambda: [8, 16, 32])
    feature_dim: int = Field(default=64, gt=0)
    mlp_dim: int = Field(default=64, gt=0)
    obs_sigma: Union[float, List[float]] = 0.05
    kinematic_mode: KinematicMode = KinematicMode.BICYCLE
    precision: str = "float64"
    init_seed: int = 0

    @field_validator("encoder_channels")
    @classmethod
    def validate_channels(cls, v: List[int]) -> List[int]:
        if not v or any(c <= 0 for c in v):
            raise ValueError("encoder_channels must be a non-empty list of positive ints")
        return v

    @field_validator("obs_sigma")
    @classmethod
    def validate_sigma(cls, v: Union[float, List[float]]) -> Union[float, List[float]]:
        values = v if isinstance(v, list) else [v]
        if isinstance(v, list) and len(v) != 4:
            raise ValueError("per-dimension obs_sigma needs 4 entries (x, y, psi, v)")
        if any(s <= 0 for s in values):
            raise ValueError("obs_sigma must be positive")
        return v

    @field_validator("precision")
    @classmethod
    def validate_precision(cls, v: str) -> str:
        if v not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")
        return v

    @model_validator(mode="after")
    def validate_resolution(self) -> "AgentModelConfig":
        factor = 2 ** len(self.encoder_channels)
        if self.birdview_resolution % factor != 0:
            raise ValueError(
                f"birdview_resolution {self.birdview_resolution} must be divisible by {factor} "
                f"for {len(self.encoder_channels)} stride-2 encoder layers"
            )
        return self

    @property
    def obs_sigma_vector(self) -> List[float]:
        if isinstance(self.obs_sigma, list):
            return list(self.obs_sigma)
        return [float(self.obs_sigma)] * 4

    @property
    def encoder_output_px(self) -> int:
        return self.birdview_resolution // (2 ** len(self.encoder_channels))


class TrainingConfig(BaseModel):
    """Optimizer and schedule settings"""
    optimizer: str = "adam"
    lr: float = Field(default=3e-4, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-8, gt=0)
    batch_size: int = Field(default=8, ge=1)
    clip_norm: Optional[float] = Field(default=1.0, gt=0)
    epochs: int = Field(default=50, ge=1)
    mode: str = "classmates_forcing"
    ema_decay: float = Field(default=0.9, ge=0, lt=1)
    seed: int = 0

    @field_validator("optimizer")
    @classmethod
    def validate_optimizer(cls, v: str) -> str:
        if v != "adam":
            raise ValueError(f"unsupported optimizer {v!r}")
        return v

    @field_validator("mode")
    @classmethod
    def validate_mode(cls, v: str) -> str:
        if v not in ("classmates_forcing", "blank_future", "teacher_forced"):
            raise ValueError(f"unknown training mode {v!r}")
        return v


class ConfigLoader:
    """
    Configuration loader with lazy loading and caching.

    Loads configuration files from SHARED/config/ directory and caches them.
    """

    def __init__(self, config_dir: Optional[Path] = None):
        """
        Initialize config loader.

        Args:
            config_dir: Optional custom config directory path
        """
        if config_dir is None:
            config_dir = Path(__file__).parent.parent / "config"
        self.config_dir = Path(config_dir)
        self._cache: Dict[str, Any] = {}

    def _load_json(self, path: Path) -> Dict:
        """Load JSON file"""
        try:
            with open(path, "r") as f:
                return json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}")

    def _load_model(self, key: str, relpath: str, model: type) -> Any:
        if key not in self._cache:
            path = self.config_dir / relpath
            try:
                self._cache[key] = model(**self._load_json(path))
            except ValidationError as exc:
                raise ConfigError(f"{path}: {exc}")
        return self._cache[key]

    def load_system(self) -> SystemConfig:
        """Load system configuration"""
        return self._load_model("system", "system.json", SystemConfig)

    def load_driver(self) -> AgentModelConfig:
        """Load driver model defaults"""
        return self._load_model("driver", "defaults/driver.json", AgentModelConfig)

    def load_training(self) -> TrainingConfig:
        """Load training defaults"""
        return self._load_model("training", "defaults/training.json", TrainingConfig)

    def clear_cache(self) -> None:
        """Clear configuration cache"""
        self._cache.clear()


# Global config loader instance
_config_loader: Optional[ConfigLoader] = None


def get_config_loader() -> ConfigLoader:
    """Get global config loader instance"""
    global _config_loader
    if _config_loader is None:
        _config_loader = ConfigLoader()
    return _config_loader
