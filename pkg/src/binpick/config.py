"""Strict JSON run configuration.

The file maps onto RunConfig: top-level keys name run-wide settings, the
"train", "controller", and "bin" sections mirror the corresponding
dataclasses field for field, and "train.schedule" is a list of
[start_progress, {strategy: weight}] phases. Unknown keys anywhere are
rejected so typos fail loudly instead of silently using defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .controller import ControllerConfig
from .explore import ExplorationSchedule
from .scene import BinSpec
from .training import TrainConfig


class ConfigError(ValueError):
    """Configuration problem; maps to exit code 2 at the CLI."""


@dataclass
class RunConfig:
    """Everything one run needs: paths, seeds, and per-module settings."""
    seed: int = 0
    jobs: int = 1
    data_dir: Path = Path("data")
    weights_dir: Path = Path("weights")
    train: TrainConfig = field(default_factory=TrainConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    bin_spec: BinSpec = field(default_factory=BinSpec)


_TOP_KEYS = {"seed", "jobs", "data_dir", "weights_dir", "train", "controller",
             "bin"}
# the run seed is the single seed source; a per-section copy would drift
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed"}
_CONTROLLER_KEYS = {f.name for f in dataclasses.fields(ControllerConfig)}
_BIN_KEYS = {f.name for f in dataclasses.fields(BinSpec)}


def _require_mapping(data, section: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    return data


def _check_keys(data: dict, allowed: set, section: str) -> None:
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in section {section!r}")


def _parse_schedule(data) -> ExplorationSchedule:
    if not isinstance(data, list):
        raise ConfigError("train.schedule must be a list of [start, weights]")
    phases = []
    for item in data:
        if (not isinstance(item, (list, tuple)) or len(item) != 2
                or not isinstance(item[1], dict)):
            raise ConfigError("each schedule phase must be [start, {strategy: weight}]")
        start, weights = item
        phases.append((float(start), {str(k): float(v) for k, v in weights.items()}))
    try:
        return ExplorationSchedule(tuple(phases))
    except ValueError as exc:
        raise ConfigError(f"train.schedule: {exc}") from exc


def _build_section(cls, data: dict, section: str, allowed: set, **fixed):
    _check_keys(data, allowed, section)
    kwargs = dict(data)
    for key, value in list(kwargs.items()):
        if key == "schedule":
            kwargs[key] = _parse_schedule(value)
        elif key == "object_curriculum":
            kwargs[key] = tuple(value)
    kwargs.update(fixed)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {section!r}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    """Build a RunConfig from parsed JSON; relative paths resolve against
    the working directory, exactly like paths given on the command line."""
    _require_mapping(data, "<top level>")
    _check_keys(data, _TOP_KEYS, "<top level>")
    seed = int(data.get("seed", 0))
    train = _build_section(TrainConfig,
                           _require_mapping(data.get("train", {}), "train"),
                           "train", _TRAIN_KEYS, seed=seed)
    controller = _build_section(
        ControllerConfig,
        _require_mapping(data.get("controller", {}), "controller"),
        "controller", _CONTROLLER_KEYS)
    bin_spec = _build_section(BinSpec,
                              _require_mapping(data.get("bin", {}), "bin"),
                              "bin", _BIN_KEYS)
    return RunConfig(seed=seed, jobs=int(data.get("jobs", 1)),
                     data_dir=Path(str(data.get("data_dir", "data"))),
                     weights_dir=Path(str(data.get("weights_dir", "weights"))),
                     train=train, controller=controller, bin_spec=bin_spec)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(data)
