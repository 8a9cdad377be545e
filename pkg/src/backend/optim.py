# src/backend/optim.py
"""AdamW with decoupled weight decay, warmup + cosine learning rate, clipping."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Tuple

import torch
import torch.nn as nn

from .device_utils import resolve_precision
from .errors import ConfigError
from .model import USRModel

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimConfig:
    peak_lr: float = 2e-3
    warmup_epochs: int = 5
    total_epochs: int = 30
    betas: Tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-8
    weight_decay: float = 0.04
    grad_clip: float = 3.0
    batch_size_labelled: int = 16
    batch_size_unlabelled: int = 16
    max_frames_labelled: int = 640
    max_frames_unlabelled: int = 640
    seed: int = 42
    device: str = "cpu"
    precision: str = "float32"
    freeze_encoder_blocks: int = 0
    layer_decay: float = 1.0
    max_skip_fraction: float = 0.01
    save_every: int = 1  # epochs between resumable checkpoints; 0 disables

    def __post_init__(self) -> None:
        if self.total_epochs < 1:
            raise ConfigError(f"optim.total_epochs must be >= 1, got {self.total_epochs}")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError(
                f"optim.warmup_epochs must be in [0, total_epochs), got {self.warmup_epochs} "
                f"with total_epochs={self.total_epochs}"
            )
        if self.peak_lr < 0 or self.weight_decay < 0:
            raise ConfigError("optim.peak_lr and optim.weight_decay must be >= 0")
        if self.grad_clip <= 0:
            raise ConfigError(f"optim.grad_clip must be > 0, got {self.grad_clip}")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigError(f"optim.betas must be two values in [0, 1), got {self.betas}")
        for name in ("batch_size_labelled", "batch_size_unlabelled", "max_frames_labelled", "max_frames_unlabelled"):
            if getattr(self, name) < 1:
                raise ConfigError(f"optim.{name} must be >= 1, got {getattr(self, name)}")
        if self.freeze_encoder_blocks < 0:
            raise ConfigError("optim.freeze_encoder_blocks must be >= 0")
        if not 0.0 < self.layer_decay <= 1.0:
            raise ConfigError(f"optim.layer_decay must be in (0, 1], got {self.layer_decay}")
        if not 0.0 <= self.max_skip_fraction <= 1.0:
            raise ConfigError("optim.max_skip_fraction must be in [0, 1]")
        if self.save_every < 0:
            raise ConfigError(f"optim.save_every must be >= 0, got {self.save_every}")
        try:
            resolve_precision(self.precision)
        except ValueError as exc:
            raise ConfigError(f"optim.precision: {exc}") from exc


def lr_schedule(step: int, warmup_steps: int, total_steps: int, peak_lr: float) -> float:
    """Linear 0 -> peak over ``warmup_steps``, then cosine peak -> 0 at ``total_steps``."""
    if warmup_steps > 0 and step <= warmup_steps:
        return peak_lr * step / warmup_steps
    decay_steps = total_steps - warmup_steps
    if decay_steps <= 0:
        return peak_lr
    progress = min(max((step - warmup_steps) / decay_steps, 0.0), 1.0)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def schedule_steps(cfg: OptimConfig, steps_per_epoch: int) -> Tuple[int, int]:
    return cfg.warmup_epochs * steps_per_epoch, cfg.total_epochs * steps_per_epoch


def freeze_encoder_blocks(model: USRModel, count: int) -> List[str]:
    """Freeze the front end and the lowest ``count`` encoder blocks."""
    if count <= 0:
        return []
    frozen = []
    for name, p in model.named_parameters():
        if model.layer_id(name) <= count and model.layer_id(name) <= model.cfg.encoder_blocks:
            p.requires_grad_(False)
            frozen.append(name)
    logger.info("Froze %d parameter tensors (front end + %d encoder blocks)", len(frozen), count)
    return frozen


def build_optimizer(model: nn.Module, cfg: OptimConfig) -> torch.optim.AdamW:
    """Matrices decay, biases / norms / embeddings of rank 1 do not.

    With ``layer_decay < 1`` each depth gets its own group whose ``lr_scale``
    shrinks geometrically towards the input.
    """
    top = getattr(getattr(model, "cfg", None), "encoder_blocks", 0) + 1
    groups: Dict[Tuple[int, bool], Dict] = {}
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        depth = model.layer_id(name) if hasattr(model, "layer_id") else top
        decay = p.dim() >= 2
        scale = cfg.layer_decay ** (top - depth) if cfg.layer_decay < 1.0 else 1.0
        key = (depth if cfg.layer_decay < 1.0 else 0, decay)
        group = groups.setdefault(key, {
            "params": [], "weight_decay": cfg.weight_decay if decay else 0.0, "lr_scale": scale,
        })
        group["params"].append(p)
    param_groups = [groups[k] for k in sorted(groups)]
    return torch.optim.AdamW(param_groups, lr=0.0, betas=tuple(cfg.betas), eps=cfg.eps, weight_decay=cfg.weight_decay)


@dataclass
class StepOutcome:
    stepped: bool
    grad_norm: float
    lr: float


def adamw_step(optimizer: torch.optim.Optimizer, lr: float, grad_clip: float) -> StepOutcome:
    """Clip by global norm, then step; non-finite gradients skip the step."""
    params = [p for g in optimizer.param_groups for p in g["params"] if p.grad is not None]
    norm = float(torch.nn.utils.clip_grad_norm_(params, grad_clip)) if params else 0.0
    if not math.isfinite(norm):
        logger.warning("Skipping optimizer step: gradient norm is %s", norm)
        optimizer.zero_grad(set_to_none=True)
        return StepOutcome(stepped=False, grad_norm=norm, lr=lr)
    for group in optimizer.param_groups:
        group["lr"] = lr * group.get("lr_scale", 1.0)
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return StepOutcome(stepped=True, grad_norm=norm, lr=lr)
