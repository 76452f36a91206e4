"""Run configuration: ``key = value`` files, overridable from the command line."""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .layers import NUM_CLASSES
from .pipeline import ABLATION_LADDER, AblationConfig
from .synth import SceneSpec


class ConfigError(ValueError):
    """Bad configuration file or value."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # corpus
    n_scenes: int = 200
    train_fraction: float = 0.8
    width: int = 64
    height: int = 64
    count_min: int = 5
    count_max: int = 150
    cluster_count: int = 4
    cluster_spread: float = 14.0
    sigma: float = 2.0
    classes: int = NUM_CLASSES
    # patch datasets
    dme_crops: int = 8
    local_crops: int = 40
    patch: int = 16
    # context estimators
    gce_size: int = 32
    gce_frozen_prefix: int = 2
    gce_lr: float = 1e-3
    gce_epochs: int = 12
    lce_lr: float = 1e-3
    lce_epochs: int = 12
    # generator and discriminator
    ablation: int = 4
    gen_lr: float = 1e-3
    gen_epochs: int = 2
    disc_lr: float = 1e-4
    disc_width_scale: float = 0.125
    lambda_a: float = 1e-3
    target_scale: float = 30.0
    squared_loss: int = 0

    def __post_init__(self):
        if self.classes != NUM_CLASSES:
            raise ConfigError(f"classes = {self.classes}: exactly {NUM_CLASSES} density classes are supported")
        if not 1 <= self.ablation <= len(ABLATION_LADDER):
            raise ConfigError(f"ablation must be 1..{len(ABLATION_LADDER)}, got {self.ablation}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must be in (0, 1)")
        if self.n_scenes < 2:
            raise ConfigError("n_scenes must be at least 2")
        if self.width % 4 or self.height % 4:
            raise ConfigError("width and height must be divisible by 4")
        if self.squared_loss not in (0, 1):
            raise ConfigError("squared_loss must be 0 or 1")
        if self.lambda_a < 0:
            raise ConfigError("lambda_a must be non-negative")
        if self.patch > min(self.width, self.height) // 2:
            raise ConfigError("patch must fit inside a quarter-area crop")
        for name in ("dme_crops", "local_crops", "gce_epochs", "lce_epochs", "gen_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("gce_lr", "lce_lr", "gen_lr", "disc_lr", "sigma", "target_scale"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        try:
            self.scene_spec()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def scene_spec(self) -> SceneSpec:
        return SceneSpec(width=self.width, height=self.height,
                         count_range=(self.count_min, self.count_max),
                         cluster_count=self.cluster_count, cluster_spread=self.cluster_spread)

    def ablation_config(self, row: int | None = None) -> AblationConfig:
        return ABLATION_LADDER[(row or self.ablation) - 1]

    def updated(self, **values) -> "RunConfig":
        """Copy with string or typed overrides; ``None`` values are ignored."""
        known = {f.name: f for f in fields(self)}
        clean = {}
        for key, value in values.items():
            if value is None:
                continue
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            clean[key] = _coerce(key, known[key].type, value)
        return replace(self, **clean)


def _coerce(key: str, type_name, value):
    kind = {"int": int, "float": float}.get(type_name if isinstance(type_name, str) else type_name.__name__)
    if kind is None:
        raise ConfigError(f"{key}: unsupported type {type_name}")
    if isinstance(value, str):
        text = value.strip()
        try:
            return kind(text)
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None
    if kind is int and isinstance(value, float) and not value.is_integer():
        raise ConfigError(f"{key}: expected an integer, got {value}")
    return kind(value)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines are skipped."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    base = RunConfig()
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
        base = base.updated(**parse_config_text(text, str(p)))
    return base.updated(**overrides)
