"""Flat INI run configuration: typed sections built from the library defaults."""
from __future__ import annotations

import configparser
import io
from dataclasses import fields
from pathlib import Path

from .model import ModelConfig
from .training import SplitSpec, TrainConfig
from .triangulation import DEFAULT_ITERATIONS, DEFAULT_MIN_CONFIDENCE, DEFAULT_THRESHOLD_PX


class ConfigError(ValueError):
    pass


def _dataclass_defaults(cls):
    return {f.name: f.default for f in fields(cls)}


def default_sections():
    return {
        "run": {"name": "", "seed": 0, "jobs": 1, "trials": 1},
        "data": {"trials_dir": "", "eval_dir": "", "checkpoint": ""},
        "split": {"mode": "subject_holdout", "held_out": ""},
        "model": {k: v for k, v in _dataclass_defaults(ModelConfig).items()},
        "train": {k: v for k, v in _dataclass_defaults(TrainConfig).items() if k != "seed"},
        "metrics": {"k": (1, 3, 5), "min_distance": 10},
        "triangulation": {"iterations": DEFAULT_ITERATIONS, "threshold": DEFAULT_THRESHOLD_PX,
                          "min_confidence": DEFAULT_MIN_CONFIDENCE, "overwrite": False},
        "synth": {"n_subjects": 4, "movements": "jump,squat", "trials_per_movement": 1, "duration": 2.0,
                  "n_cameras": 8, "noise_px": 0.0, "include_poses_3d": False},
        "baseline": {"kind": "newton", "smoothing": 5, "proxy": "ankle_mid", "n_samples": 100},
        "sweep": {"axis": "receptive_field", "values": (9, 27, 43, 81), "strategies": "scratch"},
        "plot": {"inputs": "", "labels": "", "groups": "net"},
    }


# keys whose default is None still need a declared type
_OPTIONAL_TYPES = {("train", "max_steps"): int}


def _format(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def _parse(text, default, where):
    text = str(text).strip()
    kind = type(default)
    try:
        if default is None:
            if text.lower() in ("none", ""):
                return None
            return _OPTIONAL_TYPES.get(where, str)(text)
        if kind is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind is tuple:
            return tuple(int(v) for v in text.split(",") if v.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"[{where[0]}] {where[1]}: {exc}") from None


class RunConfig:
    """Resolved configuration; every value is typed like its default."""

    def __init__(self, sections=None):
        self.sections = default_sections()
        for section, values in (sections or {}).items():
            for key, value in values.items():
                self.set(section, key, value)

    def _default(self, section, key):
        defaults = default_sections()
        if section not in defaults:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in defaults[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}]")
        return defaults[section][key]

    def set(self, section, key, value):
        default = self._default(section, key)
        if isinstance(value, str) and not isinstance(default, str):
            value = _parse(value, default, (section, key))
        elif isinstance(default, tuple) and not isinstance(value, tuple):
            value = tuple(value)
        self.sections[section][key] = value

    def get(self, section, key):
        self._default(section, key)
        return self.sections[section][key]

    def __getitem__(self, section):
        return self.sections[section]

    @classmethod
    def load(cls, path):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        if not parser.read(path, encoding="utf-8"):
            raise ConfigError(f"cannot read config file {path}")
        cfg = cls()
        for section in parser.sections():
            for key, value in parser.items(section):
                cfg.set(section, key, value)
        return cfg

    def apply_overrides(self, items):
        """Apply ``section.key=value`` strings."""
        for item in items or ():
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            lhs, value = item.split("=", 1)
            section, key = lhs.split(".", 1)
            self.set(section.strip(), key.strip(), value)

    def dumps(self):
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        for section, values in self.sections.items():
            parser[section] = {k: _format(v) for k, v in values.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def model_config(self):
        return ModelConfig(**self.sections["model"])

    def train_config(self, seed_offset=0):
        return TrainConfig(seed=self.sections["run"]["seed"] + seed_offset, **self.sections["train"])

    def split_spec(self):
        return SplitSpec(self.sections["split"]["mode"], self.sections["split"]["held_out"])
