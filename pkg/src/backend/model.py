# src/backend/model.py
"""Feature extractors, audiovisual fusion and the shared pre-LN encoder-decoder.

One ``USRModel`` serves all three input types. Visual, auditory and
audiovisual features are stacked along the batch axis so a single encoder
call (and a single set of encoder / decoder / CTC weights) handles them.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields, replace
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .autodiff_core import layer_norm, log_softmax, matmul, softmax
from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


class Modality(str, Enum):
    V = "v"
    A = "a"
    AV = "av"


ALL_MODALITIES: Tuple[Modality, ...] = (Modality.V, Modality.A, Modality.AV)

# (encoder_blocks, decoder_blocks, attn_dim, attn_heads, mlp_dim)
PRESETS: Dict[str, Tuple[int, int, int, int, int]] = {
    "base": (12, 6, 512, 8, 2048),
    "desk": (4, 2, 64, 4, 128),
}


@dataclass(frozen=True)
class ModelConfig:
    preset: str = "desk"
    encoder_blocks: int = 4
    decoder_blocks: int = 2
    attn_dim: int = 64
    attn_heads: int = 4
    mlp_dim: int = 128
    predictor_blocks: int = 2
    predictor_dim: int = 64
    vocab_total: int = 24
    video_dim: int = 16
    audio_dim: int = 8
    audio_rate_ratio: int = 4

    def __post_init__(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"model.preset must be one of {sorted(PRESETS)}, got {self.preset!r}")
        if self.attn_dim % self.attn_heads:
            raise ConfigError(
                f"model.attn_dim ({self.attn_dim}) must be divisible by model.attn_heads ({self.attn_heads})"
            )
        for name in ("encoder_blocks", "decoder_blocks", "attn_dim", "attn_heads", "mlp_dim",
                     "predictor_dim", "vocab_total", "video_dim", "audio_dim", "audio_rate_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.predictor_blocks < 0:
            raise ConfigError("model.predictor_blocks must be >= 0")

    @classmethod
    def from_preset(cls, preset: str = "desk", **overrides) -> "ModelConfig":
        if preset not in PRESETS:
            raise ConfigError(f"model.preset must be one of {sorted(PRESETS)}, got {preset!r}")
        enc, dec, dim, heads, mlp = PRESETS[preset]
        known = {f.name for f in fields(cls)}
        unknown = set(overrides) - known
        if unknown:
            raise ConfigError(f"Unknown model field(s): {', '.join(sorted(unknown))}")
        values = dict(preset=preset, encoder_blocks=enc, decoder_blocks=dec, attn_dim=dim,
                      attn_heads=heads, mlp_dim=mlp, predictor_dim=dim)
        values.update(overrides)
        return cls(**values)

    def with_corpus(self, video_dim: int, audio_dim: int, audio_rate_ratio: int, vocab_total: int) -> "ModelConfig":
        return replace(self, video_dim=video_dim, audio_dim=audio_dim,
                       audio_rate_ratio=audio_rate_ratio, vocab_total=vocab_total)


@dataclass
class EncoderOutputs:
    block_outputs: List[torch.Tensor]  # one [N, T, D] per encoder block
    final: torch.Tensor  # [N, T, D] after the closing LayerNorm


def sinusoidal_positions(length: int, dim: int, dtype: torch.dtype, device) -> torch.Tensor:
    position = torch.arange(length, dtype=torch.float64, device=device).unsqueeze(1)
    div_term = torch.exp(torch.arange(0, dim, 2, dtype=torch.float64, device=device) * (-math.log(10000.0) / dim))
    pe = torch.zeros(length, dim, dtype=torch.float64, device=device)
    pe[:, 0::2] = torch.sin(position * div_term)
    pe[:, 1::2] = torch.cos(position * div_term[: dim // 2])
    return pe.to(dtype)


def _norm(module: nn.LayerNorm, x: torch.Tensor) -> torch.Tensor:
    return layer_norm(x, module.weight, module.bias, module.eps)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.query = nn.Linear(dim, dim)
        self.key = nn.Linear(dim, dim)
        self.value = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.head_dim).transpose(1, 2)

    def forward(
        self,
        x: torch.Tensor,
        memory: torch.Tensor,
        key_pad_mask: Optional[torch.Tensor] = None,
        causal: bool = False,
    ) -> torch.Tensor:
        b, tq, d = x.shape
        tk = memory.shape[1]
        q, k, v = self._split(self.query(x)), self._split(self.key(memory)), self._split(self.value(memory))
        scores = matmul(q, k.transpose(-1, -2)) / math.sqrt(self.head_dim)

        blocked = torch.zeros((b, 1, tq, tk), dtype=torch.bool, device=x.device)
        if key_pad_mask is not None:
            blocked = blocked | key_pad_mask[:, None, None, :]
        if causal:
            future = torch.ones((tq, tk), dtype=torch.bool, device=x.device).triu(diagonal=1)
            blocked = blocked | future[None, None]
        # finite fill keeps softmax's finiteness contract; exp underflows to exactly 0
        scores = scores.masked_fill(blocked, torch.finfo(scores.dtype).min)

        weights = softmax(scores, axis=-1)
        context = matmul(weights, v).transpose(1, 2).reshape(b, tq, d)
        return self.out(context)


class FeedForward(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class PreLNBlock(nn.Module):
    """x + Attn(LN(x)) [+ x + CrossAttn(LN(x), memory)] then x + MLP(LN(x))."""

    def __init__(self, dim: int, heads: int, mlp_dim: int, cross_attention: bool = False):
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads)
        self.cross_attention = cross_attention
        if cross_attention:
            self.norm_cross = nn.LayerNorm(dim)
            self.cross_attn = MultiHeadAttention(dim, heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_dim)

    def forward(
        self,
        x: torch.Tensor,
        pad_mask: Optional[torch.Tensor] = None,
        causal: bool = False,
        memory: Optional[torch.Tensor] = None,
        memory_pad_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        h = _norm(self.norm_self, x)
        x = x + self.self_attn(h, h, pad_mask, causal)
        if self.cross_attention:
            h = _norm(self.norm_cross, x)
            x = x + self.cross_attn(h, memory, memory_pad_mask)
        return x + self.mlp(_norm(self.norm_mlp, x))


class VideoExtractor(nn.Module):
    """Per-frame two-layer MLP followed by one width-3 temporal convolution."""

    def __init__(self, in_dim: int, dim: int):
        super().__init__()
        self.frame_fc1 = nn.Linear(in_dim, dim)
        self.frame_fc2 = nn.Linear(dim, dim)
        self.temporal = nn.Conv1d(dim, dim, kernel_size=3, padding=1, padding_mode="replicate")

    def forward(self, video: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        h = self.frame_fc2(F.gelu(self.frame_fc1(video)))
        if lengths is not None:
            # padding repeats the last real frame, so the convolution sees the
            # same edge as an unpadded sequence would
            steps = torch.arange(h.shape[1], device=h.device)
            idx = torch.minimum(steps[None, :], (lengths - 1).clamp(min=0)[:, None])
            h = h.gather(1, idx.unsqueeze(-1).expand(-1, -1, h.shape[-1]))
        h = self.temporal(h.transpose(1, 2)).transpose(1, 2)
        return F.gelu(h)


def _split_stride(rate: int) -> Tuple[int, int]:
    for s in range(math.isqrt(rate), 0, -1):
        if rate % s == 0:
            return rate // s, s
    return rate, 1


class AudioExtractor(nn.Module):
    """Two strided 1D convolutions with total stride ``rate``."""

    def __init__(self, in_dim: int, dim: int, rate: int):
        super().__init__()
        self.rate = rate
        s1, s2 = _split_stride(rate)
        self.conv1 = nn.Conv1d(in_dim, dim, kernel_size=s1, stride=s1)
        self.conv2 = nn.Conv1d(dim, dim, kernel_size=s2, stride=s2)

    def forward(self, audio: torch.Tensor) -> torch.Tensor:
        if audio.shape[1] % self.rate:
            raise ShapeError(
                f"extract_audio: {audio.shape[1]} audio frames is not a multiple of rate {self.rate}"
            )
        h = F.gelu(self.conv1(audio.transpose(1, 2)))
        return F.gelu(self.conv2(h)).transpose(1, 2)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            PreLNBlock(cfg.attn_dim, cfg.attn_heads, cfg.mlp_dim) for _ in range(cfg.encoder_blocks)
        )
        self.final_norm = nn.LayerNorm(cfg.attn_dim)

    def forward(self, x: torch.Tensor, pad_mask: Optional[torch.Tensor]) -> EncoderOutputs:
        x = x + sinusoidal_positions(x.shape[1], x.shape[2], x.dtype, x.device)
        outputs: List[torch.Tensor] = []
        for block in self.blocks:
            x = block(x, pad_mask)
            outputs.append(x)
        return EncoderOutputs(block_outputs=outputs, final=_norm(self.final_norm, x))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.embed = nn.Embedding(cfg.vocab_total, cfg.attn_dim)
        self.blocks = nn.ModuleList(
            PreLNBlock(cfg.attn_dim, cfg.attn_heads, cfg.mlp_dim, cross_attention=True)
            for _ in range(cfg.decoder_blocks)
        )
        self.final_norm = nn.LayerNorm(cfg.attn_dim)
        self.out = nn.Linear(cfg.attn_dim, cfg.vocab_total)

    def forward(
        self,
        y_in: torch.Tensor,
        y_pad_mask: Optional[torch.Tensor],
        memory: torch.Tensor,
        memory_pad_mask: Optional[torch.Tensor],
    ) -> torch.Tensor:
        x = self.embed(y_in)
        x = x + sinusoidal_positions(x.shape[1], x.shape[2], x.dtype, x.device)
        for block in self.blocks:
            x = block(x, y_pad_mask, causal=True, memory=memory, memory_pad_mask=memory_pad_mask)
        return self.out(_norm(self.final_norm, x))


class Predictor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        dim = cfg.predictor_dim
        heads = cfg.attn_heads if dim % cfg.attn_heads == 0 else 1
        self.proj_in = nn.Linear(cfg.attn_dim, dim) if dim != cfg.attn_dim else nn.Identity()
        self.blocks = nn.ModuleList(
            PreLNBlock(dim, heads, 2 * dim) for _ in range(cfg.predictor_blocks)
        )
        self.final_norm = nn.LayerNorm(dim)
        self.proj_out = nn.Linear(dim, cfg.attn_dim) if dim != cfg.attn_dim else nn.Identity()

    def forward(self, x: torch.Tensor, pad_mask: Optional[torch.Tensor]) -> torch.Tensor:
        x = self.proj_in(x)
        for block in self.blocks:
            x = block(x, pad_mask)
        return self.proj_out(_norm(self.final_norm, x))


@dataclass
class ModalityEncoding:
    """Encoder outputs for several modalities stacked along the batch axis."""
    outputs: EncoderOutputs
    pad_mask: torch.Tensor  # [len(modalities) * B, T]
    modality_index: torch.Tensor  # [len(modalities) * B]
    modalities: Tuple[Modality, ...]
    batch_size: int

    def rows(self, modality: Modality) -> slice:
        i = self.modalities.index(modality)
        return slice(i * self.batch_size, (i + 1) * self.batch_size)

    def final_for(self, modality: Modality) -> torch.Tensor:
        return self.outputs.final[self.rows(modality)]

    def pad_mask_for(self, modality: Modality) -> torch.Tensor:
        return self.pad_mask[self.rows(modality)]


class USRModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.attn_dim
        self.video_extractor = VideoExtractor(cfg.video_dim, d)
        self.audio_extractor = AudioExtractor(cfg.audio_dim, d, cfg.audio_rate_ratio)
        self.video_proj = nn.Linear(d, d)
        self.audio_proj = nn.Linear(d, d)
        self.fusion = nn.Linear(2 * d, d)
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)
        self.ctc_proj = nn.Linear(d, cfg.vocab_total)
        self.predictor = Predictor(cfg)
        self.mask_token = nn.Parameter(torch.randn(d) * 0.02)

    # -- feature extraction -------------------------------------------------

    def extract_video(self, video: torch.Tensor, lengths: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.video_extractor(video, lengths)

    def extract_audio(self, audio: torch.Tensor) -> torch.Tensor:
        return self.audio_extractor(audio)

    def fuse_av(self, fv: torch.Tensor, fa: torch.Tensor) -> torch.Tensor:
        if fv.shape[:-1] != fa.shape[:-1]:
            raise ShapeError(f"fuse_av: video features {tuple(fv.shape)} and audio features {tuple(fa.shape)} differ in length")
        return self.fusion(torch.cat([fv, fa], dim=-1))

    def modality_features(
        self,
        video: torch.Tensor,
        audio: torch.Tensor,
        lengths: Optional[torch.Tensor] = None,
        modalities: Sequence[Modality] = ALL_MODALITIES,
        feature_mask: Optional[torch.Tensor] = None,
    ) -> Dict[Modality, torch.Tensor]:
        """Projected features per modality; ``feature_mask`` positions become the mask token."""
        need_v = any(m in (Modality.V, Modality.AV) for m in modalities)
        need_a = any(m in (Modality.A, Modality.AV) for m in modalities)
        ev = self.extract_video(video, lengths) if need_v else None
        ea = self.extract_audio(audio) if need_a else None
        if ev is not None and ea is not None and ev.shape[1] != ea.shape[1]:
            raise ShapeError(f"video gives {ev.shape[1]} frames but audio gives {ea.shape[1]}")

        feats: Dict[Modality, torch.Tensor] = {}
        for m in modalities:
            if m is Modality.V:
                f = self.video_proj(ev)
            elif m is Modality.A:
                f = self.audio_proj(ea)
            else:
                f = self.fuse_av(ev, ea)
            if feature_mask is not None:
                f = torch.where(feature_mask.unsqueeze(-1), self.mask_token.to(f.dtype), f)
            feats[m] = f
        return feats

    @staticmethod
    def batch_modalities(feats: Dict[Modality, torch.Tensor]) -> Tuple[torch.Tensor, torch.Tensor]:
        """Stack modality features along the batch axis; returns (rows, modality index)."""
        mods = list(feats)
        x = torch.cat([feats[m] for m in mods], dim=0)
        b = feats[mods[0]].shape[0]
        index = torch.cat([
            torch.full((b,), ALL_MODALITIES.index(m), dtype=torch.long, device=x.device) for m in mods
        ])
        return x, index

    @staticmethod
    def split_modalities(x: torch.Tensor, modalities: Sequence[Modality]) -> Dict[Modality, torch.Tensor]:
        parts = torch.chunk(x, len(modalities), dim=0)
        return dict(zip(modalities, parts))

    # -- shared encoder / decoder / heads ----------------------------------

    def encode(self, features: torch.Tensor, pad_mask: Optional[torch.Tensor] = None) -> EncoderOutputs:
        return self.encoder(features, pad_mask)

    def forward_encoder(
        self,
        video: torch.Tensor,
        audio: torch.Tensor,
        lengths: torch.Tensor,
        modalities: Sequence[Modality] = ALL_MODALITIES,
        feature_mask: Optional[torch.Tensor] = None,
    ) -> ModalityEncoding:
        modalities = tuple(modalities)
        feats = self.modality_features(video, audio, lengths, modalities, feature_mask)
        x, index = self.batch_modalities(feats)
        steps = torch.arange(video.shape[1], device=video.device)
        pad = (steps[None, :] >= lengths[:, None]).repeat(len(modalities), 1)
        return ModalityEncoding(
            outputs=self.encode(x, pad),
            pad_mask=pad,
            modality_index=index,
            modalities=modalities,
            batch_size=video.shape[0],
        )

    def ctc_head(self, enc_final: torch.Tensor) -> torch.Tensor:
        return log_softmax(self.ctc_proj(enc_final), axis=-1)

    def decode_teacher_forced(
        self,
        enc_final: torch.Tensor,
        enc_pad_mask: Optional[torch.Tensor],
        y_in: torch.Tensor,
        y_pad_mask: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        return self.decoder(y_in, y_pad_mask, enc_final, enc_pad_mask)

    def next_token_log_probs(
        self,
        enc_final: torch.Tensor,
        enc_pad_mask: Optional[torch.Tensor],
        y_in: torch.Tensor,
    ) -> torch.Tensor:
        """Log-probabilities of the token following each (unpadded) prefix in ``y_in``."""
        logits = self.decode_teacher_forced(enc_final, enc_pad_mask, y_in)
        return log_softmax(logits[:, -1], axis=-1)

    def predictor_forward(self, enc_final: torch.Tensor, pad_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.predictor(enc_final, pad_mask)

    # -- parameter groups ----------------------------------------------------

    def layer_id(self, name: str) -> int:
        """Depth of a parameter: 0 for the front end, 1..N for encoder blocks, N+1 above."""
        top = self.cfg.encoder_blocks + 1
        if name.startswith(("video_extractor", "audio_extractor", "video_proj", "audio_proj",
                            "fusion", "mask_token")):
            return 0
        if name.startswith("encoder.blocks."):
            return int(name.split(".")[2]) + 1
        return top

    def encoder_state(self) -> Dict[str, torch.Tensor]:
        """Everything pre-training trains: front end, encoder, predictor, mask token."""
        keep = ("video_extractor", "audio_extractor", "video_proj", "audio_proj",
                "fusion", "encoder.", "predictor.", "mask_token")
        return {k: v for k, v in self.state_dict().items() if k.startswith(keep)}
