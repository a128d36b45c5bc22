"""Pipeline configuration: a flat key=value file with CLI overrides.

Keys are `section.name` (see DEFAULTS); values parse as the type of the
default.  Every stage-parameter object re-validates its ranges on
construction, so a bad config fails before any compute starts.
"""

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .depth import DepthParams
from .errors import ConfigError
from .formats import read_keyvalues
from .fusion import FusionParams
from .geometry import RansacParams
from .matching import FeatureParams, FlowParams


@dataclass(frozen=True)
class PipelineConfig:
    image_dir: str = ""
    camera_dir: str = ""  # calibrated cameras; empty -> five-point pose recovery
    gt_cloud: str = ""  # reference cloud for the evaluation stage
    output_dir: str = "out"
    seed: int = 0
    threads: int = 0  # 0 = one worker per cpu
    num_planes: int = 128
    d_min: float = 0.0  # 0 = derive both bounds from triangulated matches
    d_max: float = 0.0
    flow_max_dim: int = 256  # pose/range flow runs on images capped to this size
    match_stride: int = 2  # feature-grid stride when exporting matches
    eval_max_dist: float = 20.0
    features: FeatureParams = field(default_factory=FeatureParams)
    flow: FlowParams = field(default_factory=FlowParams)
    ransac: RansacParams = field(default_factory=RansacParams)
    depth: DepthParams = field(default_factory=DepthParams)
    fusion: FusionParams = field(default_factory=FusionParams)

    def __post_init__(self):
        if self.num_planes < 2:
            raise ConfigError("pipeline.num_planes must be >= 2")
        if self.d_min < 0 or self.d_max < 0:
            raise ConfigError("depth range bounds cannot be negative")
        if self.d_max and self.d_min and self.d_max <= self.d_min:
            raise ConfigError("pipeline.d_max must exceed pipeline.d_min")
        if self.flow_max_dim < 64:
            raise ConfigError("pipeline.flow_max_dim must be >= 64")
        if self.match_stride < 1:
            raise ConfigError("pipeline.match_stride must be >= 1")
        if self.threads < 0:
            raise ConfigError("pipeline.threads cannot be negative")

    def validate_paths(self):
        if not self.image_dir or not Path(self.image_dir).is_dir():
            raise ConfigError(f"image directory not found: {self.image_dir!r}")
        if self.camera_dir and not Path(self.camera_dir).is_dir():
            raise ConfigError(f"camera directory not found: {self.camera_dir!r}")
        if self.gt_cloud and not Path(self.gt_cloud).is_file():
            raise ConfigError(f"ground-truth cloud not found: {self.gt_cloud!r}")


_SECTIONS = {
    "features": ("features", FeatureParams),
    "flow": ("flow", FlowParams),
    "ransac": ("ransac", RansacParams),
    "depth": ("depth", DepthParams),
    "fusion": ("fusion", FusionParams),
}

_PIPELINE_KEYS = {
    "image_dir": str,
    "camera_dir": str,
    "gt_cloud": str,
    "output_dir": str,
    "seed": int,
    "threads": int,
    "num_planes": int,
    "d_min": float,
    "d_max": float,
    "flow_max_dim": int,
    "match_stride": int,
    "eval_max_dist": float,
}


def _convert(raw: str, kind):
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def apply_settings(config: PipelineConfig, settings) -> PipelineConfig:
    """Apply `section.key=value` strings (already split into a mapping)."""
    pipeline_updates = {}
    section_updates = {name: {} for name in _SECTIONS}
    for key, raw in settings.items():
        if "." not in key:
            raise ConfigError(f"config key {key!r} must look like section.name")
        section, name = key.split(".", 1)
        if section == "pipeline":
            if name not in _PIPELINE_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            pipeline_updates[name] = _convert(raw, _PIPELINE_KEYS[name])
        elif section in _SECTIONS:
            attr, cls = _SECTIONS[section]
            params_fields = {f.name: f.type for f in fields(cls)}
            if name not in params_fields:
                raise ConfigError(f"unknown config key {key!r}")
            current = getattr(config, attr)
            kind = type(getattr(current, name))
            section_updates[section][name] = _convert(raw, kind)
        else:
            raise ConfigError(f"unknown config section {section!r}")

    for section, updates in section_updates.items():
        if not updates:
            continue
        attr, _ = _SECTIONS[section]
        try:
            pipeline_updates[attr] = replace(getattr(config, attr), **updates)
        except ValueError as exc:
            raise ConfigError(f"[{section}] {exc}") from exc
    try:
        return replace(config, **pipeline_updates)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides=None) -> PipelineConfig:
    """Defaults, then the config file, then `KEY=VALUE` override strings."""
    config = PipelineConfig()
    if path:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path!r}")
        config = apply_settings(config, read_keyvalues(path))
    if overrides:
        mapping = {}
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            key, value = item.split("=", 1)
            mapping[key.strip()] = value.strip()
        config = apply_settings(config, mapping)
    return config


def dump_config(config: PipelineConfig) -> str:
    """All settings as the key=value text the config file accepts."""
    lines = []
    for name in _PIPELINE_KEYS:
        lines.append(f"pipeline.{name}={getattr(config, name)}")
    for section, (attr, cls) in _SECTIONS.items():
        params = getattr(config, attr)
        for f in fields(cls):
            lines.append(f"{section}.{f.name}={getattr(params, f.name)}")
    return "\n".join(lines) + "\n"
