"""Experiment configuration: a flat key=value INI file with fixed sections.

Unknown sections or keys are rejected; every run embeds the resolved config
and its digest in its outputs.
"""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

SCHEMA: dict[str, dict[str, str]] = {
    "data": {
        "root": "str",
    },
    "synth": {
        "n_train_sequences": "int",
        "n_eval_sequences": "int",
        "frames_per_seq": "int",
        "frame_size": "int",
        "n_stills": "int",
    },
    "model": {
        "backbone": "str",
        "backbone_channels": "int",
        "head_depth": "str",
    },
    "train": {
        "mode": "str",
        "lambda_k": "float",
        "lambda_c": "float",
        "lambda_r": "float",
        "lr": "float",
        "epochs": "int",
        "seed": "int",
        "batch_size": "int",
        "steps_per_epoch": "int",
        "warmup_epochs": "int",
        "lambda_values": "floats",
        "pretrained_head": "str",
    },
    "attack": {
        "delta_values": "floats",
        "steps_grid": "ints",
        "attacked_frames": "int",
        "n_sequences": "int",
        "window_weight": "float",
    },
    "report": {
        "dpi": "int",
    },
}

DEFAULTS: dict[str, dict[str, object]] = {
    "data": {"root": "data"},
    "synth": {
        "n_train_sequences": 8,
        "n_eval_sequences": 5,
        "frames_per_seq": 36,
        "frame_size": 160,
        "n_stills": 40,
    },
    "model": {"backbone": "tiny", "backbone_channels": 32, "head_depth": "shallow"},
    "train": {
        "mode": "mtl",
        "lambda_k": 1.0,
        "lambda_c": 1.0,
        "lambda_r": 1.2,
        "lr": 8e-4,
        "epochs": 50,
        "seed": 0,
        "batch_size": 8,
        "steps_per_epoch": 20,
        "warmup_epochs": 0,
        "lambda_values": [0.0, 0.2],
        "pretrained_head": "",
    },
    "attack": {
        "delta_values": [0.1],
        "steps_grid": [10, 50],
        "attacked_frames": 100,
        "n_sequences": 5,
        "window_weight": 0.0,
    },
    "report": {"dpi": 110},
}


def _coerce(kind: str, raw: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "floats":
            return [float(v) for v in raw.replace(",", " ").split()]
        if kind == "ints":
            return [int(v) for v in raw.replace(",", " ").split()]
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {kind}") from exc


@dataclass
class ExperimentConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def digest(self) -> str:
        blob = json.dumps(self.values, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def to_json(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: dict | None = None) -> "ExperimentConfig":
        """Load defaults, then the INI file, then flag overrides (highest)."""
        values = {sec: dict(v) for sec, v in DEFAULTS.items()}
        if path is not None:
            parser = configparser.ConfigParser()
            read = parser.read(path)
            if not read:
                raise ConfigError(f"cannot read config file {path}")
            for section in parser.sections():
                if section not in SCHEMA:
                    raise ConfigError(f"unknown config section [{section}]")
                for key, raw in parser.items(section):
                    if key not in SCHEMA[section]:
                        raise ConfigError(f"unknown config key {section}.{key}")
                    values[section][key] = _coerce(SCHEMA[section][key], raw)
        for dotted, value in (overrides or {}).items():
            section, key = dotted.split(".", 1)
            if section not in SCHEMA or key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key {dotted}")
            if isinstance(value, str):
                value = _coerce(SCHEMA[section][key], value)
            values[section][key] = value
        return cls(values=values)
