# src/backend/checkpoint.py
"""Versioned checkpoints: model config, corpus config, float32 weights by name."""
from __future__ import annotations

import logging
import os
from dataclasses import asdict
from typing import Any, Dict, Optional, Tuple

import torch

from .model import ModelConfig, USRModel
from .synth_data import CorpusConfig

logger = logging.getLogger(__name__)

FORMAT = "usr-checkpoint"
VERSION = 1


def save_checkpoint(
    path: str,
    model: USRModel,
    corpus_config: CorpusConfig,
    manifest: Optional[Dict[str, Any]] = None,
    teacher: Optional[USRModel] = None,
    optimizer: Optional[torch.optim.Optimizer] = None,
    extra: Optional[Dict[str, Any]] = None,
) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "model_config": asdict(model.cfg),
        "corpus_config": asdict(corpus_config),
        "manifest": manifest or {},
        "params": {k: v.detach().to("cpu", torch.float32).clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    if teacher is not None:
        payload["teacher"] = {k: v.detach().to("cpu", torch.float32).clone() for k, v in teacher.state_dict().items()}
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    torch.save(payload, path)
    logger.info("Saved checkpoint to %s", path)
    return path


def read_checkpoint(path: str) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise ValueError(f"{path} is not a checkpoint written by this package")
    if payload.get("version") != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('version')} (expected {VERSION})")
    return payload


def load_checkpoint(
    path: str,
    device: str = "cpu",
    dtype: torch.dtype = torch.float32,
) -> Tuple[USRModel, CorpusConfig, Dict[str, Any]]:
    """Rebuild the model a checkpoint was saved from. Returns (model, corpus config, payload)."""
    payload = read_checkpoint(path)
    model = USRModel(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["params"])
    model.to(device=device, dtype=dtype)
    model.eval()
    return model, CorpusConfig(**payload["corpus_config"]), payload


def load_encoder_init(model: USRModel, path: str) -> int:
    """Copy pre-trained front end / encoder / predictor weights into ``model``."""
    payload = read_checkpoint(path)
    own = model.state_dict()
    wanted = set(model.encoder_state())
    loaded = 0
    for name, tensor in payload["params"].items():
        if name in wanted and own[name].shape == tensor.shape:
            own[name].copy_(tensor.to(own[name].dtype))
            loaded += 1
    logger.info("Initialised %d tensors from pre-trained checkpoint %s", loaded, path)
    return loaded
