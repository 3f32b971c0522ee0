"""Run-configuration file: strict JSON schema shared by the CLI commands.

Sections mirror the component configs (knn / svm / detector / feature / io).
Parsing is strict: unknown keys anywhere are an error, so typos fail loudly
instead of silently falling back to defaults. Explicit command-line flags
always override file values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

from .detector import DetectorConfig
from .errors import ApneaScreenError
from .features import FeatureConfig
from .phenotype_knn import KnnConfig
from .svm import SvmConfig


class ConfigError(ApneaScreenError):
    pass


@dataclass(frozen=True)
class IoConfig:
    db_path: Optional[str] = None
    out_path: Optional[str] = None


@dataclass(frozen=True)
class RunConfig:
    knn: KnnConfig = field(default_factory=KnnConfig)
    svm: SvmConfig = field(default_factory=SvmConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    feature: FeatureConfig = field(default_factory=FeatureConfig)
    io: IoConfig = field(default_factory=IoConfig)


_SCHEMA = {
    "knn": {"k": int, "k_prime": int, "gender_weight": float, "age_weight": float, "bmi_weight": float},
    "svm": {"C": float, "gamma": (float, str)},
    "detector": {
        "frame_s": float,
        "merge_gap_s": float,
        "paradox_vote_bonus": float,
        "vote_threshold": float,
        "desat_threshold": float,
    },
    "feature": {"band_low_hz": float, "band_high_hz": float, "paradox_threshold": float},
    "io": {"db_path": str, "out_path": str},
}

_SECTION_TYPES = {
    "knn": KnnConfig,
    "svm": SvmConfig,
    "detector": DetectorConfig,
    "feature": FeatureConfig,
    "io": IoConfig,
}


def _coerce(section: str, key: str, value, expected):
    if isinstance(expected, tuple):
        if isinstance(value, str):
            return value
        expected = float
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key}: expected a number, got {value!r}")
        return float(value)
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{section}.{key}: expected an integer, got {value!r}")
        return value
    if expected is str:
        if not isinstance(value, str):
            raise ConfigError(f"{section}.{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{section}.{key}: unsupported type")


def load_run_config(path) -> RunConfig:
    """Parse and validate a JSON run-config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")

    unknown_sections = set(raw) - set(_SCHEMA)
    if unknown_sections:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown_sections))}")

    sections = {}
    for section, keys in _SCHEMA.items():
        body = raw.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be an object")
        unknown = set(body) - set(keys)
        if unknown:
            raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(sorted(unknown))}")
        kwargs = {k: _coerce(section, k, v, keys[k]) for k, v in body.items()}
        try:
            sections[section] = _SECTION_TYPES[section](**kwargs)
        except (ValueError, ApneaScreenError) as exc:
            raise ConfigError(f"invalid {section} config: {exc}") from exc
    return RunConfig(**sections)
