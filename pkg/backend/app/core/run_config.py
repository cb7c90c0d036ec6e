"""Run configuration loading for SensorLens experiments"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from app.core.config import settings
from app.services.cart_baseline import CART_FEATURE_MODES
from app.services.cnn_model import MODEL_PRESETS
from app.services.cnn_trainer import TrainConfig
from app.services.fault_injector import NOISE_REFERENCES
from app.services.fault_spec import (
    FAULT_SEGMENT_LENGTH,
    FIXED_GRID,
    MIXED_F,
    MIXED_G,
    MIXED_R,
    NOISE_GRID,
    SHORT_GRID,
    FaultKind,
)
from app.services.sensor_ingest import WINDOW_LENGTH

logger = logging.getLogger(__name__)

CART_MODEL = "CART"
MODEL_CHOICES = MODEL_PRESETS + (CART_MODEL,)


class ConfigLoadError(Exception):
    """Custom exception for run configuration errors"""
    pass


class CartConfig(BaseModel):
    """Settings of the CART baseline"""
    max_depth: int = Field(default=12, ge=0)
    min_leaf: int = Field(default=5, ge=1)
    feature_mode: str = Field(default="image", description="image | raw_temperature")

    @field_validator("feature_mode")
    @classmethod
    def _check_mode(cls, v: str) -> str:
        if v not in CART_FEATURE_MODES:
            raise ValueError(f"feature_mode must be one of {CART_FEATURE_MODES}")
        return v


class RunConfig(BaseModel):
    """Everything an experiment run depends on; outputs are a pure function of it"""
    dataset_path: Optional[str] = Field(default=None, description="IBRL data.txt")
    synthetic: bool = Field(default=False, description="Use generated streams instead of IBRL")
    synthetic_samples: int = Field(default=6400, ge=1, description="Samples per synthetic node")
    nodes: List[int] = Field(default_factory=lambda: [1, 2])
    window_length: int = WINDOW_LENGTH
    window_stride: Optional[int] = Field(default=None, ge=1, description="Defaults to window_length")
    max_windows: Optional[int] = Field(default=None, ge=4)

    noise_grid: List[float] = Field(default_factory=lambda: list(NOISE_GRID))
    short_grid: List[float] = Field(default_factory=lambda: list(SHORT_GRID))
    fixed_grid: List[float] = Field(default_factory=lambda: list(FIXED_GRID))
    fault_w: int = Field(default=FAULT_SEGMENT_LENGTH, ge=1)
    mixed_r: float = Field(default=MIXED_R, gt=0)
    mixed_f: float = Field(default=MIXED_F, gt=0)
    mixed_G: float = MIXED_G
    noise_reference: str = "window"

    models: List[str] = Field(default_factory=lambda: list(MODEL_CHOICES))
    train: TrainConfig = Field(default_factory=TrainConfig)
    cart: CartConfig = Field(default_factory=CartConfig)

    abnormal_fraction: float = Field(default=0.5, gt=0, lt=1)
    split: float = Field(default=0.7, gt=0, lt=1)
    validation_fraction: float = Field(default=0.2, gt=0, lt=1)
    seed_count: int = Field(default=5, ge=1)
    master_seed: int = Field(..., ge=0)
    train_once: bool = Field(default=False, description="Train at the mid grid intensity, test at every intensity")

    output_dir: Optional[str] = None
    jobs: int = Field(default=1, ge=1)

    @field_validator("nodes")
    @classmethod
    def _check_nodes(cls, v: List[int]) -> List[int]:
        if not v or any(n < 1 for n in v):
            raise ValueError("nodes must be a non-empty list of ids >= 1")
        if len(set(v)) != len(v):
            raise ValueError("nodes must not repeat")
        return v

    @field_validator("models")
    @classmethod
    def _check_models(cls, v: List[str]) -> List[str]:
        unknown = [m for m in v if m not in MODEL_CHOICES]
        if unknown or not v:
            raise ValueError(f"models must be a non-empty subset of {MODEL_CHOICES}, got {unknown or v}")
        return v

    @field_validator("noise_grid", "short_grid")
    @classmethod
    def _check_positive_grid(cls, v: List[float]) -> List[float]:
        if not v or any(x <= 0 for x in v):
            raise ValueError("noise and short grids need positive intensities")
        return v

    @field_validator("noise_reference")
    @classmethod
    def _check_reference(cls, v: str) -> str:
        if v not in NOISE_REFERENCES:
            raise ValueError(f"noise_reference must be one of {NOISE_REFERENCES}")
        return v

    @model_validator(mode="after")
    def _check_source(self) -> "RunConfig":
        if self.window_length != WINDOW_LENGTH:
            raise ValueError(f"gray images need {WINDOW_LENGTH}-sample windows")
        if self.fault_w > self.window_length:
            raise ValueError("fault_w cannot exceed the window length")
        if not self.synthetic and not self.dataset_path:
            raise ValueError("set dataset_path or synthetic: true")
        if not self.fixed_grid:
            raise ValueError("fixed_grid must not be empty")
        return self

    @property
    def cnn_models(self) -> List[str]:
        return [m for m in self.models if m != CART_MODEL]

    @property
    def data_source(self) -> str:
        """Watermark carried into every report"""
        return "synthetic" if self.synthetic else "ibrl"

    def grid(self, kind: FaultKind) -> List[float]:
        grids = {FaultKind.NOISE: self.noise_grid, FaultKind.SHORT: self.short_grid, FaultKind.FIXED: self.fixed_grid}
        if kind not in grids:
            raise ValueError(f"{kind.value} has no intensity grid")
        return grids[kind]

    def train_intensity(self, kind: FaultKind) -> float:
        """Middle value of the sorted grid, used when ``train_once`` is set"""
        ordered = sorted(self.grid(kind))
        return ordered[(len(ordered) - 1) // 2]

    def resolved_output_dir(self) -> Path:
        return Path(self.output_dir) if self.output_dir else settings.get_output_path()

    def check_paths(self) -> None:
        """
        Raises:
            ConfigLoadError: If the dataset file is missing at run time
        """
        if self.synthetic:
            return
        if not Path(self.dataset_path).is_file():
            raise ConfigLoadError(f"Dataset not found: {self.dataset_path}")

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """
        Copy with CLI overrides applied; ``None`` values are ignored.

        Raises:
            ConfigLoadError: If the result no longer validates
        """
        data = self.model_dump()
        for key, value in overrides.items():
            if value is None:
                continue
            if "." in key:
                section, field = key.split(".", 1)
                data[section][field] = value
            else:
                data[key] = value
        try:
            return RunConfig(**data)
        except ValidationError as e:
            raise ConfigLoadError(f"Invalid override: {e}") from e


class RunConfigLoader:
    """Loads run configurations from YAML or JSON files"""

    def __init__(self, configs_dir: Optional[Path] = None):
        """
        Args:
            configs_dir: Directory holding named configs.
                         Defaults to backend/configs/
        """
        if configs_dir is None:
            # app/core/run_config.py -> backend/configs
            self.configs_dir = Path(__file__).parent.parent.parent / "configs"
        else:
            self.configs_dir = Path(configs_dir)
        self._cache: Dict[str, RunConfig] = {}

    def resolve(self, name_or_path: str) -> Path:
        """A file path as given, else a named config from ``configs_dir``."""
        path = Path(name_or_path)
        if path.is_file():
            return path
        for suffix in (".yaml", ".yml", ".json"):
            candidate = self.configs_dir / f"{name_or_path}{suffix}"
            if candidate.is_file():
                return candidate
        available = self.list_available_configs()
        raise ConfigLoadError(
            f"Run config '{name_or_path}' not found. "
            f"Available configs: {', '.join(available) or 'none'}"
        )

    def load(self, name_or_path: str) -> RunConfig:
        """
        Load and validate a run configuration.

        Raises:
            ConfigLoadError: If the file is missing, unparsable or invalid
        """
        path = self.resolve(name_or_path)
        key = str(path.resolve())
        if key in self._cache:
            return self._cache[key]

        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigLoadError(f"Invalid YAML in {path}: {e}") from e
        except OSError as e:
            raise ConfigLoadError(f"Cannot read {path}: {e}") from e

        if not isinstance(data, dict):
            raise ConfigLoadError(f"{path} must hold a mapping of settings")
        try:
            config = RunConfig(**data)
        except ValidationError as e:
            raise ConfigLoadError(f"Invalid run config {path}: {e}") from e

        self._cache[key] = config
        logger.info(f"Loaded run config {path} (master_seed={config.master_seed}, source={config.data_source})")
        return config

    def list_available_configs(self) -> List[str]:
        if not self.configs_dir.exists():
            return []
        names = {p.stem for p in self.configs_dir.iterdir() if p.suffix in (".yaml", ".yml", ".json")}
        return sorted(names)

    def clear_cache(self) -> None:
        self._cache.clear()


# Singleton instance
_loader: Optional[RunConfigLoader] = None


def get_run_config_loader() -> RunConfigLoader:
    """Get or create the RunConfigLoader singleton"""
    global _loader
    if _loader is None:
        _loader = RunConfigLoader()
    return _loader


def load_run_config(name_or_path: str) -> RunConfig:
    return get_run_config_loader().load(name_or_path)
