# src/backend/config.py
"""Run manifests: JSON files plus ``section.field=value`` overrides.

A manifest fully determines a run given the corpus files; the resolved
version is written next to the run outputs.
"""
from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence

from .decode_eval import DecodeConfig
from .errors import ConfigError
from .losses import LossWeights
from .model import ModelConfig
from .optim import OptimConfig
from .pretrain import PretrainConfig, SpanMaskConfig
from .pseudo_label import PseudoConfig
from .synth_data import AugmentConfig, CorpusConfig

STAGES = ("supervised", "semi", "pretrain")


@dataclass(frozen=True)
class CorpusPaths:
    labelled: str = ""
    unlabelled: str = ""
    eval: str = ""


@dataclass(frozen=True)
class RunManifest:
    stage: str = "supervised"
    corpus: CorpusPaths = field(default_factory=CorpusPaths)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    mask: SpanMaskConfig = field(default_factory=SpanMaskConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    pseudo: PseudoConfig = field(default_factory=PseudoConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    shared: bool = True
    init_checkpoint: str = ""
    out_dir: str = ""

    def __post_init__(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class DataManifest:
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    n_utterances: int = 400
    labelled_fraction: float = 0.5
    n_eval: Optional[int] = None
    workers: int = 1

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def parse_override(item: str) -> tuple:
    """``"optim.peak_lr=0.001"`` -> (["optim", "peak_lr"], 0.001). Values are JSON, else strings."""
    if "=" not in item:
        raise ConfigError(f"Override {item!r} is not of the form section.field=value")
    key, raw = item.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"Override {item!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for item in overrides:
        path, value = parse_override(item)
        node = data
        for part in path[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            if not isinstance(child, dict):
                raise ConfigError(f"Override {item!r}: {part} is not a section")
            node = child
        node[path[-1]] = value
    return data


def _build(cls, data: Any, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'manifest'} must be a JSON object")
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        where = f" in {prefix}" if prefix else ""
        raise ConfigError(f"Unknown key(s){where}: {', '.join(sorted(unknown))}")

    if cls is ModelConfig:
        values = dict(data)
        return ModelConfig.from_preset(values.pop("preset", "desk"), **values)

    kwargs = {}
    for name, value in data.items():
        typ = hints[name]
        if dataclasses.is_dataclass(typ):
            kwargs[name] = _build(typ, value, f"{prefix}.{name}" if prefix else name)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{prefix or 'manifest'}: {exc}") from exc


def _load_json(path: str) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def load_manifest(path: str = "", overrides: Sequence[str] = ()) -> RunManifest:
    data = _load_json(path) if path else {}
    return _build(RunManifest, apply_overrides(data, overrides), "")


def load_data_manifest(path: str = "", overrides: Sequence[str] = ()) -> DataManifest:
    data = _load_json(path) if path else {}
    return _build(DataManifest, apply_overrides(data, overrides), "")


def manifest_from_dict(data: Dict[str, Any]) -> RunManifest:
    return _build(RunManifest, data, "")


def save_manifest(manifest, out_dir: str, name: str = "manifest.json") -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, name)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest.to_dict(), f, indent=2, sort_keys=True)
    return path


__all__: List[str] = [
    "CorpusPaths", "RunManifest", "DataManifest", "STAGES",
    "parse_override", "apply_overrides", "load_manifest", "load_data_manifest",
    "manifest_from_dict", "save_manifest",
]
