"""Run configuration: a validated dataclass tree with a TOML-style file format.

The on-disk format is plain-text sections of ``key = value`` pairs::

    [model]
    t_max = 6
    mixture_components = 10

    [flags]
    eg_ablation = false

Values are ints, floats, booleans, quoted strings, or flat lists thereof.
Unknown sections or keys are rejected. ``dumps``/``loads`` round-trip a config
canonically, which the checkpoint container relies on.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Optional


class ConfigError(ValueError):
    """Invalid configuration file or field value (CLI exit code 2)."""


@dataclass
class ModelConfig:
    image_size: int = 50
    glimpse_size: int = 20
    t_max: int = 6
    control_points: int = 5
    curve_samples: int = 100
    mixture_components: int = 10
    feature_dim: int = 256
    hidden_dim: int = 256
    scale_min: float = 0.2
    rotation_max: float = math.pi / 4
    cp_limit: float = 1.2
    presence_bias_init: float = 0.0
    stn_identity_init: bool = True


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 64
    lr_nvil: float = 1e-3
    lr_rest: float = 1e-4
    beta: float = 4.0
    baseline_decay: float = 0.9
    grad_clip: float = 10.0
    checkpoint_every: int = 500
    metrics_every: int = 10


@dataclass
class DataConfig:
    kind: str = "synthetic"  # synthetic | idx | png
    path: str = ""
    labels_path: str = ""
    invert: bool = False
    split: str = "train"


@dataclass
class SyntheticConfig:
    n_images: int = 2000
    stroke_counts: list = field(default_factory=lambda: [1])
    n_templates: int = 0  # 0: free random strokes; >0: planted canonical types
    template_jitter: float = 0.04
    cp_span: float = 0.75
    shift_span: float = 0.35
    scale_lo: float = 0.6
    scale_hi: float = 0.95
    rotation_span: float = 0.6
    sigma: float = 3.0
    stroke_slope: float = 0.3
    canvas_slope: float = 0.6
    seed: int = 1234


@dataclass
class Flags:
    eg_ablation: bool = False
    rho_rsd: bool = False
    literal_raster_formula: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    workers: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    flags: Flags = field(default_factory=Flags)

    def validate(self) -> "RunConfig":
        m = self.model
        if m.image_size < 8 or m.glimpse_size < 2:
            raise ConfigError("image_size/glimpse_size too small")
        if m.t_max < 1 or m.control_points < 2 or m.curve_samples < 2:
            raise ConfigError("t_max, control_points and curve_samples must be positive")
        if m.mixture_components < 1:
            raise ConfigError("mixture_components must be >= 1")
        if not (0 < m.scale_min < 1):
            raise ConfigError("scale_min must lie in (0, 1)")
        if self.train.batch_size < 1 or self.train.steps < 0:
            raise ConfigError("batch_size/steps out of range")
        if self.train.beta < 0:
            raise ConfigError("beta must be nonnegative")
        if self.data.kind not in ("synthetic", "idx", "png"):
            raise ConfigError(f"unknown data kind {self.data.kind!r}")
        if not (0 < self.synthetic.scale_lo <= self.synthetic.scale_hi <= 1.0):
            raise ConfigError("synthetic scale range invalid")
        return self


_SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "data": DataConfig,
    "synthetic": SyntheticConfig,
    "flags": Flags,
}
_ROOT_KEYS = {"seed": int, "workers": int}


def _parse_scalar(text: str, where: str):
    text = text.strip()
    if text.startswith("[") and text.endswith("]"):
        inner = text[1:-1].strip()
        if not inner:
            return []
        return [_parse_scalar(part, where) for part in inner.split(",")]
    if text in ("true", "false"):
        return text == "true"
    if text.startswith('"') and text.endswith('"') and len(text) >= 2:
        return text[1:-1]
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse value {text!r}") from None


def _coerce(value, target_type, where: str):
    if target_type is float and isinstance(value, int):
        return float(value)
    if target_type is int and isinstance(value, bool):
        raise ConfigError(f"{where}: expected int, got bool")
    if target_type is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected list")
        return value
    if not isinstance(value, target_type):
        raise ConfigError(f"{where}: expected {target_type.__name__}, got {type(value).__name__}")
    return value


def loads(text: str) -> RunConfig:
    """Parse config text; every field validated, unknown keys rejected."""
    cfg = RunConfig()
    section: Optional[str] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"line {lineno}"
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected key = value")
        key, _, value_text = line.partition("=")
        key = key.strip()
        value = _parse_scalar(value_text, where)
        if section is None:
            if key not in _ROOT_KEYS:
                raise ConfigError(f"{where}: unknown key {key!r}")
            setattr(cfg, key, _coerce(value, _ROOT_KEYS[key], where))
            continue
        target = getattr(cfg, section)
        fields = {f.name: f for f in dataclasses.fields(target)}
        if key not in fields:
            raise ConfigError(f"{where}: unknown key {key!r} in section [{section}]")
        current = getattr(target, key)
        target_type = list if isinstance(current, list) else type(current)
        setattr(target, key, _coerce(value, target_type, where))
    return cfg.validate()


def load(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return loads(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _format_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, str):
        return f'"{value}"'
    if isinstance(value, list):
        return "[" + ", ".join(_format_scalar(v) for v in value) + "]"
    return str(value)


def dumps(cfg: RunConfig) -> str:
    """Canonical text form; loads(dumps(cfg)) reproduces cfg exactly."""
    lines = [f"{k} = {_format_scalar(getattr(cfg, k))}" for k in _ROOT_KEYS]
    for section in _SECTIONS:
        lines.append("")
        lines.append(f"[{section}]")
        sub = getattr(cfg, section)
        for f in dataclasses.fields(sub):
            lines.append(f"{f.name} = {_format_scalar(getattr(sub, f.name))}")
    return "\n".join(lines) + "\n"


def apply_overrides(cfg: RunConfig, overrides) -> RunConfig:
    """Apply ``--set section.key=value`` style overrides."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, _, value_text = item.partition("=")
        key = key.strip()
        value = _parse_scalar(value_text, f"override {item!r}")
        if "." in key:
            section, _, name = key.partition(".")
            if section not in _SECTIONS:
                raise ConfigError(f"override {item!r}: unknown section {section!r}")
            target = getattr(cfg, section)
            if name not in {f.name for f in dataclasses.fields(target)}:
                raise ConfigError(f"override {item!r}: unknown key {name!r}")
            current = getattr(target, name)
            target_type = list if isinstance(current, list) else type(current)
            setattr(target, name, _coerce(value, target_type, f"override {item!r}"))
        else:
            if key not in _ROOT_KEYS:
                raise ConfigError(f"override {item!r}: unknown key")
            setattr(cfg, key, _coerce(value, _ROOT_KEYS[key], f"override {item!r}"))
    return cfg.validate()


def data_root() -> str:
    """Dataset root fallback, configurable via the DOOD_DATA_DIR env var."""
    return os.environ.get("DOOD_DATA_DIR", os.path.join(os.getcwd(), "data"))
