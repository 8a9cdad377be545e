# src/backend/pretrain.py
"""Masked-prediction pre-training: span masks, teacher targets, cosine loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Mapping, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .autodiff_core import instance_norm
from .errors import ConfigError, ShapeError
from .losses import require_modalities
from .model import ALL_MODALITIES, Modality, USRModel
from .synth_data import ViewBatch

logger = logging.getLogger(__name__)

TARGET_LAYERS = ("average", "last")


@dataclass(frozen=True)
class SpanMaskConfig:
    start_prob: float = 0.4
    span_frames: int = 3

    def __post_init__(self) -> None:
        if not 0.0 <= self.start_prob <= 1.0:
            raise ConfigError(f"mask.start_prob must be in [0, 1], got {self.start_prob}")
        if self.span_frames < 1:
            raise ConfigError(f"mask.span_frames must be >= 1, got {self.span_frames}")


@dataclass(frozen=True)
class PretrainConfig:
    target_modality: str = "av"
    target_layers: str = "average"

    def __post_init__(self) -> None:
        if self.target_modality not in {m.value for m in ALL_MODALITIES}:
            raise ConfigError(f"pretrain.target_modality must be one of v/a/av, got {self.target_modality!r}")
        if self.target_layers not in TARGET_LAYERS:
            raise ConfigError(f"pretrain.target_layers must be one of {TARGET_LAYERS}, got {self.target_layers!r}")


@dataclass
class MaskSpec:
    video_mask: np.ndarray  # [T_v] bool, True = masked
    audio_mask: np.ndarray  # [r * T_v] bool

    @property
    def masked_fraction(self) -> float:
        return float(self.video_mask.mean()) if self.video_mask.size else 0.0


def sample_span_mask(num_frames: int, cfg: SpanMaskConfig, rng: np.random.Generator, rate: int = 1) -> MaskSpec:
    """Each frame starts a span with probability ``start_prob``; spans are clipped at the end."""
    if num_frames <= 0:
        return MaskSpec(video_mask=np.zeros(0, dtype=bool), audio_mask=np.zeros(0, dtype=bool))
    starts = rng.random(num_frames) < cfg.start_prob
    covered = np.convolve(starts.astype(np.int64), np.ones(cfg.span_frames, dtype=np.int64))[:num_frames]
    video_mask = covered > 0
    return MaskSpec(video_mask=video_mask, audio_mask=np.repeat(video_mask, rate))


def batch_span_masks(
    views: ViewBatch,
    cfg: SpanMaskConfig,
    rngs: Sequence[np.random.Generator],
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Padded ``[B, T]`` feature mask and ``[B, r*T]`` raw-audio mask; padding is never masked."""
    b, t = views.video.shape[:2]
    r = views.audio.shape[1] // max(1, t)
    video = np.zeros((b, t), dtype=bool)
    audio = np.zeros((b, r * t), dtype=bool)
    for i, rng in enumerate(rngs):
        n = int(views.lengths[i])
        spec = sample_span_mask(n, cfg, rng, rate=r)
        video[i, :n] = spec.video_mask
        audio[i, : r * n] = spec.audio_mask
    device = views.video.device
    return torch.as_tensor(video, device=device), torch.as_tensor(audio, device=device)


def apply_input_mask(views: ViewBatch, video_mask: torch.Tensor, audio_mask: torch.Tensor) -> ViewBatch:
    """Zero raw frames under the mask so no masked content reaches the extractors."""
    video = views.video.masked_fill(video_mask.unsqueeze(-1), 0.0)
    audio = views.audio.masked_fill(audio_mask.unsqueeze(-1), 0.0)
    return replace(views, video=video, audio=audio)


@torch.no_grad()
def build_targets(teacher: USRModel, views: ViewBatch, cfg: PretrainConfig) -> torch.Tensor:
    """Teacher encoder outputs on unmasked input, block-averaged then instance-normalised."""
    modality = Modality(cfg.target_modality)
    enc = teacher.forward_encoder(views.video, views.audio, views.lengths, modalities=(modality,))
    blocks = enc.outputs.block_outputs
    if cfg.target_layers == "last":
        stacked = blocks[-1]
    else:
        stacked = torch.stack(blocks, dim=0).mean(dim=0)
    return instance_norm(stacked, views.lengths)


def masked_cosine_loss(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Negated cosine similarity averaged over masked positions per sample, then over the batch."""
    if pred.shape != target.shape:
        raise ShapeError(f"masked_cosine_loss: predictions {tuple(pred.shape)} vs targets {tuple(target.shape)}")
    if pred.dim() == 2:
        pred, target, mask = pred.unsqueeze(0), target.unsqueeze(0), mask.unsqueeze(0)
    mask = mask.bool()
    degenerate = mask & ((pred.detach().norm(dim=-1) == 0) | (target.norm(dim=-1) == 0))
    if bool(degenerate.any()):
        logger.warning("masked_cosine_loss: %d masked position(s) with a zero-norm vector count as 0",
                       int(degenerate.sum()))
    cos = F.cosine_similarity(pred, target, dim=-1, eps=1e-12)
    use = (mask & ~degenerate).to(cos.dtype)
    count = mask.to(cos.dtype).sum(dim=1)
    per_sample = torch.where(count > 0, (cos * use).sum(dim=1) / count.clamp(min=1.0), torch.zeros_like(count))
    return -per_sample.mean()


def pretrain_loss(per_mod: Mapping[Modality, torch.Tensor], lambda_v: float) -> torch.Tensor:
    require_modalities(per_mod, "pretrain_loss")
    v, a, av = (per_mod[m] for m in ALL_MODALITIES)
    return lambda_v * v + (1.0 - lambda_v) * (a + av)
