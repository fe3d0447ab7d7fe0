"""Pipeline configuration: a flat set of dotted keys, read from YAML (nested or flat)."""
from __future__ import annotations

import dataclasses
import datetime as dt
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .coldstart import STRATEGIES, EncoderConfig
from .dataset import DEFAULT_TIMEZONE, SynthConfig
from .kg import ExtractionConfig
from .model import ModelConfig

SERVING_ENV = "RIPPLEREC_SERVING_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    data_dir: str | None = None
    inter_path: str | None = None
    user_path: str | None = None
    item_path: str | None = None
    timezone: str = DEFAULT_TIMEZONE
    device_filter: str | None = None
    train_date: str | None = None
    train_window_days: int = 1
    valid_fraction: float = 0.1
    work_dir: str = "work"
    serving_dir: str = "serving"
    n_workers: int = 1
    max_history: int | None = None
    strategy: str = "similarity"
    index_window_days: int | None = None
    train_encoder: bool = False
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    extraction: ExtractionConfig = field(default_factory=ExtractionConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def validate(self) -> None:
        if self.train_date is None:
            raise ConfigError("pipeline.train_date is required")
        try:
            dt.date.fromisoformat(self.train_date)
        except ValueError:
            raise ConfigError(f"pipeline.train_date {self.train_date!r} is not YYYY-MM-DD") from None
        if self.data_dir is None and None in (self.inter_path, self.user_path, self.item_path):
            raise ConfigError("set data.dir or all of data.inter_path, data.user_path, data.item_path")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"coldstart.strategy must be one of {STRATEGIES}")
        if self.index_window_days is not None and self.index_window_days < 1:
            raise ConfigError("coldstart.index_window_days must be >= 1")
        if self.train_window_days < 1:
            raise ConfigError("pipeline.train_window_days must be >= 1")
        if not 0.0 <= self.valid_fraction < 1.0:
            raise ConfigError("pipeline.valid_fraction must lie in [0, 1)")
        try:
            self.model.validate()
        except ValueError as err:
            raise ConfigError(str(err)) from None

    def snapshot(self) -> dict:
        """Settings that determine the archive contents (no filesystem paths)."""
        return {
            "timezone": self.timezone, "device_filter": self.device_filter,
            "train_date": self.train_date, "train_window_days": self.train_window_days,
            "valid_fraction": self.valid_fraction, "max_history": self.max_history,
            "strategy": self.strategy, "index_window_days": self.index_window_days,
            "train_encoder": self.train_encoder, "seed": self.seed,
            "extraction": dataclasses.asdict(self.extraction),
            "encoder": dataclasses.asdict(self.encoder) if self.train_encoder else None,
        }


# dotted key -> (target, attribute)
_KEYS = {
    "data.dir": (None, "data_dir"),
    "data.inter_path": (None, "inter_path"),
    "data.user_path": (None, "user_path"),
    "data.item_path": (None, "item_path"),
    "data.timezone": (None, "timezone"),
    "data.device_filter": (None, "device_filter"),
    "pipeline.train_date": (None, "train_date"),
    "pipeline.train_window_days": (None, "train_window_days"),
    "pipeline.valid_fraction": (None, "valid_fraction"),
    "pipeline.work_dir": (None, "work_dir"),
    "pipeline.serving_dir": (None, "serving_dir"),
    "pipeline.n_workers": (None, "n_workers"),
    "kg.max_history": (None, "max_history"),
    "coldstart.strategy": (None, "strategy"),
    "coldstart.index_window_days": (None, "index_window_days"),
    "coldstart.train_encoder": (None, "train_encoder"),
    "seed": (None, "seed"),
}
for _f in dataclasses.fields(ModelConfig):
    if _f.name != "seed":
        _KEYS[f"model.{_f.name}"] = ("model", _f.name)
for _f in dataclasses.fields(ExtractionConfig):
    _KEYS[f"kg.{_f.name}"] = ("extraction", _f.name)
for _f in dataclasses.fields(EncoderConfig):
    if _f.name != "seed":
        _KEYS[f"coldstart.encoder_{_f.name}"] = ("encoder", _f.name)


def flatten(doc: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in (doc or {}).items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(flatten(value, name + "."))
        else:
            out[name] = value
    return out


def _coerce(current, value, key):
    if value is None:
        return None
    if isinstance(value, dt.date):
        value = value.isoformat()
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean")
        return value
    if isinstance(current, tuple):
        return tuple(int(v) for v in value)
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return str(value) if not isinstance(value, (int, float)) else value


def config_from_mapping(doc: dict, base_dir: str | os.PathLike | None = None) -> PipelineConfig:
    """Build a config from nested or dotted keys. Relative paths resolve against ``base_dir``."""
    cfg = PipelineConfig()
    for key, value in flatten(doc).items():
        if key not in _KEYS:
            raise ConfigError(f"unknown configuration key {key!r}")
        target, attr = _KEYS[key]
        obj = cfg if target is None else getattr(cfg, target)
        setattr(obj, attr, _coerce(getattr(obj, attr), value, key))
    cfg.model.seed = cfg.seed
    cfg.encoder.seed = cfg.seed
    if base_dir is not None:
        for attr in ("data_dir", "inter_path", "user_path", "item_path", "work_dir", "serving_dir"):
            val = getattr(cfg, attr)
            if val is not None and not os.path.isabs(val):
                setattr(cfg, attr, str(Path(base_dir) / val))
    env = os.environ.get(SERVING_ENV)
    if env:
        cfg.serving_dir = env
    return cfg


def load_config(path: str | os.PathLike) -> PipelineConfig:
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return config_from_mapping(doc, Path(path).resolve().parent)


def synth_config_from_mapping(doc: dict) -> SynthConfig:
    doc = flatten(doc)
    cfg = SynthConfig()
    for key, value in doc.items():
        name = key.split(".", 1)[1] if key.startswith("synth.") else key
        if not hasattr(cfg, name):
            raise ConfigError(f"unknown synthetic-data key {key!r}")
        setattr(cfg, name, _coerce(getattr(cfg, name), value, key))
    return cfg


def load_synth_config(path: str | os.PathLike) -> SynthConfig:
    with open(path, encoding="utf-8") as fh:
        return synth_config_from_mapping(yaml.safe_load(fh) or {})
