"""Run configuration: one JSON document binding model, training, data, tracking and synthesis settings."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .dbfen import DbfenConfig
from .model import ModelConfig
from .synth import SynthSpec
from .tracking import DEFAULT_GATE_PX, DEFAULT_MAX_GAP, DEFAULT_MIN_LEN, DEFAULT_SMOOTH_W
from .train import AdamConfig, PhaseConfig, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    frames: str | None = None  # directory of numbered PGM frames plus manifest.json
    annotations: str | None = None  # JSON lines {image, class_id, cx, cy, w, h}
    image_size: int = 416


@dataclass
class TrackConfig:
    gate_px: float = DEFAULT_GATE_PX
    max_gap: int = DEFAULT_MAX_GAP
    min_len: int = DEFAULT_MIN_LEN
    smooth_w: int = DEFAULT_SMOOTH_W
    fps: float | None = None  # required for motility; physical units have no default
    um_per_px: float | None = None

    def __post_init__(self):
        if self.gate_px <= 0 or self.max_gap < 0 or self.min_len < 1:
            raise ConfigError(f"invalid tracking settings {self}")
        if self.smooth_w < 1 or self.smooth_w % 2 == 0:
            raise ConfigError(f"smooth_w must be a positive odd integer, got {self.smooth_w}")
        for name in ("fps", "um_per_px"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ConfigError(f"{name} must be positive, got {v}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    track: TrackConfig = field(default_factory=TrackConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    seed: int = 0

    def __post_init__(self):
        # frames are fed to the network unresized
        if self.data.image_size != self.model.image_size:
            raise ConfigError(f"data.image_size {self.data.image_size} differs from model.image_size "
                              f"{self.model.image_size}")

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        """Keys left out at any depth keep their default values."""
        return _build(cls, d, "config", cls())

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    def digest(self) -> str:
        """Short SHA-256 of the canonical JSON form, for provenance."""
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()[:12]


# nested dataclass types, so dicts can be rebuilt without guessing
_NESTED = {
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "data"): DataConfig,
    (RunConfig, "track"): TrackConfig,
    (RunConfig, "synth"): SynthSpec,
    (ModelConfig, "dbfen"): DbfenConfig,
    (TrainConfig, "phase1"): PhaseConfig,
    (TrainConfig, "phase2"): PhaseConfig,
    (TrainConfig, "adam"): AdamConfig,
}


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _build(cls, d, where: str, default):
    """Rebuild ``cls`` from ``d``, taking missing keys from the ``default`` instance."""
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object, got {type(d).__name__}")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {name: getattr(default, name) for name in names}
    for key, value in d.items():
        sub = _NESTED.get((cls, key))
        kwargs[key] = _build(sub, value, f"{where}.{key}", kwargs[key]) if sub is not None else value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _rows(obj, prefix: str):
    for f in fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if is_dataclass(value):
            yield from _rows(value, key + ".")
        else:
            yield key, _plain(value)


def reference_markdown() -> str:
    """Every configuration key with its default, as a Markdown table."""
    lines = [
        "# Configuration reference",
        "",
        "Generated by `active.config.reference_markdown()`; every key can be set in the JSON file",
        "passed with `--config`. Keys left out take the defaults below.",
        "",
        "| key | default |",
        "| --- | --- |",
    ]
    for key, value in _rows(RunConfig(), ""):
        lines.append(f"| `{key}` | `{json.dumps(value)}` |")
    return "\n".join(lines) + "\n"
