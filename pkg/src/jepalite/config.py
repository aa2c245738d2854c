"""Run configuration: one YAML file mirroring the component configs, plus
dotted-key overrides from the command line (flags win over the file).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

import yaml

from .datasets import INDEX_NAME
from .model import ModelConfig
from .packing import PackerConfig
from .pipeline import PipelineConfig
from .training import TrainConfig


class ConfigError(Exception):
    """Invalid run configuration; message names the offending field."""


_SECTIONS = {
    "pipeline": PipelineConfig,
    "packer": PackerConfig,
    "model": ModelConfig,
    "train": TrainConfig,
}

_TOP_DEFAULTS: dict[str, Any] = {
    "dataset": None,
    "output_dir": "out",
    "seed": 0,
    "max_steps": None,
    "max_epochs": None,
    "checkpoint_every": 500,
    "workers": 1,
}

# fields whose one source of truth is outside their section
_TIED_FIELDS = {
    ("train", "seed"): "top-level 'seed'",
    ("train", "batch_rows"): "'packer.batch_rows'",
    ("model", "patch_size"): "'pipeline.patch_size'",
}


@dataclass
class RunConfig:
    dataset: str
    output_dir: str
    seed: int
    pipeline: PipelineConfig
    packer: PackerConfig
    model: ModelConfig
    train: TrainConfig
    max_steps: Optional[int] = None
    max_epochs: Optional[float] = None
    checkpoint_every: int = 500
    workers: int = 1


def _coerce(value: Any) -> Any:
    return tuple(value) if isinstance(value, list) else value


def _build_section(name: str, cls: type, data: dict) -> Any:
    fields = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in fields:
            raise ConfigError(f"{name}.{key}: unknown field")
    try:
        return cls(**{k: _coerce(v) for k, v in data.items()})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from e


def _apply_overrides(data: dict, overrides: dict[str, str]) -> None:
    for dotted, raw in overrides.items():
        try:
            value = yaml.safe_load(raw) if isinstance(raw, str) else raw
        except yaml.YAMLError as e:
            raise ConfigError(f"{dotted}: unparseable value {raw!r}: {e}") from e
        parts = dotted.split(".")
        if len(parts) == 1:
            data[parts[0]] = value
        elif len(parts) == 2 and parts[0] in _SECTIONS:
            data.setdefault(parts[0], {})[parts[1]] = value
        else:
            raise ConfigError(f"{dotted}: unknown override key")


def load_run_config(
    path: Optional[str | Path] = None,
    overrides: Optional[dict[str, str]] = None,
    require_dataset: bool = True,
) -> RunConfig:
    """Build a validated RunConfig from an optional YAML file plus overrides."""
    data: dict[str, Any] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            loaded = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{p}: invalid YAML: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"{p}: top level must be a mapping")
        data = loaded
    _apply_overrides(data, overrides or {})

    known_top = set(_TOP_DEFAULTS) | set(_SECTIONS)
    for key in data:
        if key not in known_top:
            raise ConfigError(f"{key}: unknown field")

    top = dict(_TOP_DEFAULTS)
    top.update({k: v for k, v in data.items() if k in _TOP_DEFAULTS})

    sections: dict[str, Any] = {}
    for name, cls in _SECTIONS.items():
        section_data = dict(data.get(name) or {})
        for (sec, field), source in _TIED_FIELDS.items():
            if sec == name and field in section_data:
                raise ConfigError(f"{name}.{field}: set via {source} instead")
        if name == "train":
            section_data["seed"] = int(top["seed"])
            section_data["batch_rows"] = sections["packer"].batch_rows
        if name == "model":
            section_data["patch_size"] = sections["pipeline"].patch_size
        if name == "packer":
            section_data.setdefault("batch_rows", 8)
            section_data.setdefault("context_capacity", 64)
            section_data.setdefault("target_capacity", 192)
        sections[name] = _build_section(name, cls, section_data)

    if require_dataset:
        if not top["dataset"]:
            raise ConfigError("dataset: required (directory containing index.csv)")
        dataset_dir = Path(top["dataset"])
        if not (dataset_dir / INDEX_NAME).is_file():
            raise ConfigError(f"dataset: no {INDEX_NAME} under {dataset_dir}")

    try:
        return RunConfig(
            dataset=str(top["dataset"]),
            output_dir=str(top["output_dir"]),
            seed=int(top["seed"]),
            max_steps=None if top["max_steps"] is None else int(top["max_steps"]),
            max_epochs=None if top["max_epochs"] is None else float(top["max_epochs"]),
            checkpoint_every=int(top["checkpoint_every"]),
            workers=int(top["workers"]),
            **sections,
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def config_to_dict(cfg: RunConfig) -> dict:
    def plain(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return [plain(v) for v in obj]
        return obj

    return plain(cfg)


def config_hash(cfg: RunConfig) -> str:
    """Stable short hash of the fully resolved configuration."""
    canonical = json.dumps(config_to_dict(cfg), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()[:12]
