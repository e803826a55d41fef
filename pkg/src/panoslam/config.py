"""Experiment configuration: nested dataclasses with strict YAML round trip."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class TrackingConfig:
    iterations: int = 40
    lr_rotation: float = 4e-4
    lr_translation: float = 2e-3
    silhouette_threshold: float = 0.99
    tolerance: float = 0.0          # stop when |loss delta| < tolerance; 0 disables
    color_weight: float = 1.0
    depth_weight: float = 1.0
    velocity: str = "additive"      # or "relative"

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("tracking.iterations must be >= 1")
        if not 0 < self.silhouette_threshold < 1:
            raise ConfigError("tracking.silhouette_threshold must lie in (0, 1)")
        if self.velocity not in ("additive", "relative"):
            raise ConfigError("tracking.velocity must be 'additive' or 'relative'")


@dataclass
class MappingConfig:
    color_weight: float = 1.0
    depth_weight: float = 1.0
    class_weight: float = 1.0
    dice_weight: float = 1.0
    focal_weight: float = 20.0
    depth_error_factor: float = 50.0
    densify_silhouette: float = 0.5
    keyframe_interval: int = 5
    window: int = 8                  # a 4-frame window lets shared Gaussians drift off old views
    keyframe_points: int = 4096
    iterations: int = 30
    warmup_iterations: int = 100
    warmup_frames: int = 5
    panoptic_in_warmup: bool = True
    no_object_weight: float = 0.1
    lr_centers: float = 3e-4
    lr_colors: float = 2.5e-3
    lr_semantics: float = 2.5e-3
    lr_radii: float = 1e-2           # relative step: radii are updated in log space
    lr_opacities: float = 5e-2
    lr_head: float = 1e-3

    def __post_init__(self):
        for name in ("color_weight", "depth_weight", "class_weight", "dice_weight", "focal_weight"):
            if getattr(self, name) < 0:
                raise ConfigError(f"mapping.{name} must be >= 0")
        if self.window < 1:
            raise ConfigError("mapping.window must be >= 1")
        if self.keyframe_interval < 1:
            raise ConfigError("mapping.keyframe_interval must be >= 1")
        if self.iterations < 0 or self.warmup_iterations < 0:
            raise ConfigError("mapping iteration counts must be >= 0")

    def learning_rates(self) -> dict[str, float]:
        return {
            "centers": self.lr_centers, "colors": self.lr_colors, "semantics": self.lr_semantics,
            "radii": self.lr_radii, "sem_radii": self.lr_radii, "opacities": self.lr_opacities,
            "sem_opacities": self.lr_opacities, "regions": self.lr_head, "classifier": self.lr_head,
            "w1": self.lr_head, "b1": self.lr_head, "w2": self.lr_head, "b2": self.lr_head,
        }


@dataclass
class StlConfig:
    enabled: bool = True
    window: int = 4
    voxel_size: float = 0.05

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("stl.window must be >= 1")
        if not self.voxel_size > 0:
            raise ConfigError("stl.voxel_size must be > 0")


@dataclass
class HeadConfig:
    n_regions: int = 64
    n_classes: int = 16
    hidden: int = 16
    null_class: bool = True
    class_threshold: float = 0.5
    keep_frac: float = 0.8

    def __post_init__(self):
        if self.n_regions < 1 or self.n_classes < 2 or self.hidden < 3:
            raise ConfigError("head needs n_regions >= 1, n_classes >= 2, hidden >= 3")


@dataclass
class SlamConfig:
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    mapping: MappingConfig = field(default_factory=MappingConfig)
    stl: StlConfig = field(default_factory=StlConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    seed: int = 0
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SlamConfig":
        return from_mapping(cls, data, "")

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "SlamConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config is not valid YAML: {exc}") from exc
        return cls.from_dict(data or {})

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> "SlamConfig":
        return cls.loads(Path(path).read_text())

    def replace(self, **sections) -> "SlamConfig":
        return dataclasses.replace(self, **sections)


def from_mapping(cls, data, prefix: str = ""):
    """Build dataclass ``cls`` from nested dicts, rejecting unknown keys and wrong types."""
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = from_mapping(type(default), value, f"{prefix}{key}.")
        else:
            kwargs[key] = _coerce(default, value, f"{prefix}{key}")
    if kwargs.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {kwargs['schema_version']}")
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def _coerce(default, value, key: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{key}' expects a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key '{key}' expects an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{key}' expects a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key '{key}' expects a string")
        return value
    return value
