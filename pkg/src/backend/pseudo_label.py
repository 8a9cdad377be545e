# src/backend/pseudo_label.py
"""EMA teacher and pseudo-label generation.

The teacher sees unmasked audiovisual input once per unlabelled sample; its
CTC frames and greedy attention sequence are then shared by the student's
visual, auditory and audiovisual losses.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import torch
import torch.nn as nn

from .errors import ConfigError, ContractError
from .model import Modality, ModalityEncoding, USRModel
from .synth_data import ViewBatch
from .tokenizer import Tokenizer

logger = logging.getLogger(__name__)

SAMPLING_MODES = ("greedy", "soft")
MOMENTUM_SCHEDULES = ("cosine", "constant")
NORMALISATIONS = ("kept", "none")


@dataclass(frozen=True)
class PseudoConfig:
    mu0: float = 0.999
    momentum_schedule: str = "cosine"
    sampling: str = "greedy"
    warmup_steps: int = 0
    max_len_margin: int = 2
    normalisation: str = "kept"
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.mu0 <= 1.0:
            raise ConfigError(f"pseudo.mu0 must be in [0, 1], got {self.mu0}")
        if self.momentum_schedule not in MOMENTUM_SCHEDULES:
            raise ConfigError(f"pseudo.momentum_schedule must be one of {MOMENTUM_SCHEDULES}, got {self.momentum_schedule!r}")
        if self.sampling not in SAMPLING_MODES:
            raise ConfigError(f"pseudo.sampling must be one of {SAMPLING_MODES}, got {self.sampling!r}")
        if self.normalisation not in NORMALISATIONS:
            raise ConfigError(f"pseudo.normalisation must be one of {NORMALISATIONS}, got {self.normalisation!r}")
        if self.warmup_steps < 0 or self.max_len_margin < 0:
            raise ConfigError("pseudo.warmup_steps and pseudo.max_len_margin must be >= 0")


def momentum_schedule(step: int, total_steps: int, mu0: float = 0.999) -> float:
    """Cosine increase from ``mu0`` at step 0 to exactly 1.0 at ``total_steps``."""
    if total_steps <= 0:
        return 1.0
    t = min(max(step, 0), total_steps)
    if t == total_steps:
        return 1.0
    return 1.0 - (1.0 - mu0) * (math.cos(math.pi * t / total_steps) + 1.0) / 2.0


def momentum_at(cfg: PseudoConfig, step: int, total_steps: int) -> float:
    if cfg.momentum_schedule == "constant":
        return cfg.mu0
    return momentum_schedule(step, total_steps, cfg.mu0)


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, mu: float) -> None:
    """theta_t <- mu * theta_t + (1 - mu) * theta_s, in place."""
    if not 0.0 <= mu <= 1.0:
        raise ContractError(f"ema_update: momentum must be in [0, 1], got {mu}")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        diff = sorted(set(t_params) ^ set(s_params))
        raise ContractError(f"ema_update: teacher and student parameters differ: {', '.join(diff[:5])}")
    for name, t in t_params.items():
        s = s_params[name]
        if t.shape != s.shape:
            raise ContractError(
                f"ema_update: parameter {name} has shape {tuple(t.shape)} in the teacher "
                f"but {tuple(s.shape)} in the student"
            )
        t.mul_(mu).add_(s.detach().to(t.dtype), alpha=1.0 - mu)


class TeacherState:
    """A frozen copy of the student that only ever moves by ``ema_update``."""

    def __init__(self, student: USRModel, momentum: float = 0.999):
        self.model: USRModel = copy.deepcopy(student)
        self.model.eval()
        for p in self.model.parameters():
            p.requires_grad_(False)
        self.momentum = momentum
        self.forward_count = 0  # teacher forwards, counted per sample

    def update(self, student: USRModel, mu: float) -> None:
        ema_update(self.model, student, mu)
        self.momentum = mu

    @torch.no_grad()
    def encode_av(self, views: ViewBatch) -> ModalityEncoding:
        """Teacher encoder on unmasked audiovisual input."""
        self.forward_count += views.size
        return self.model.forward_encoder(views.video, views.audio, views.lengths, modalities=(Modality.AV,))

    def state_dict(self) -> Dict[str, object]:
        return {"model": self.model.state_dict(), "momentum": self.momentum, "forward_count": self.forward_count}

    def load_state_dict(self, state: Dict[str, object]) -> None:
        self.model.load_state_dict(state["model"])
        self.momentum = float(state["momentum"])
        self.forward_count = int(state["forward_count"])


@dataclass
class PseudoLabelSet:
    ctc_frames: torch.Tensor  # [B, T] argmax token per frame
    ctc_conf: torch.Tensor  # [B, T], 0 on padding
    ctc_valid: torch.Tensor  # [B, T] bool, False on padding
    attn_tokens: torch.Tensor  # [B, L] padded with pad id
    attn_conf: torch.Tensor  # [B, L], 0 on padding
    attn_valid: torch.Tensor  # [B, L] bool
    ctc_kept: torch.Tensor = field(default=None)  # [B, T] bool
    attn_kept: torch.Tensor = field(default=None)  # [B, L] bool

    @property
    def attn_lengths(self) -> torch.Tensor:
        return self.attn_valid.sum(dim=1)

    def apply_threshold(self, tau_ctc: float, tau_attn: float) -> "PseudoLabelSet":
        self.ctc_kept = confidence_filter(self.ctc_conf, tau_ctc) & self.ctc_valid
        self.attn_kept = confidence_filter(self.attn_conf, tau_attn) & self.attn_valid
        return self


def confidence_filter(conf: torch.Tensor, tau: float) -> torch.Tensor:
    """Keep mask: True iff confidence >= tau."""
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"threshold must be in [0, 1], got {tau}")
    return conf >= tau


@torch.no_grad()
def generate_ctc_pseudo(model: USRModel, enc_final: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Per-frame argmax of the CTC head and its probability. Blank is a valid target."""
    probs = model.ctc_head(enc_final).exp()
    conf, frames = probs.max(dim=-1)
    return frames, conf


def decoder_candidates(tok: Tokenizer) -> torch.Tensor:
    """Ids the decoder may emit: content tokens and eos."""
    return torch.tensor(list(range(tok.vocab_size)) + [tok.eos_id], dtype=torch.long)


@torch.no_grad()
def generate_attention_pseudo(
    model: USRModel,
    enc_final: torch.Tensor,
    enc_pad_mask: Optional[torch.Tensor],
    max_lens: torch.Tensor,
    tok: Tokenizer,
    sampling: str = "greedy",
    generator: Optional[torch.Generator] = None,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Autoregressive pseudo-sequences, batched.

    Each row stops after emitting eos or after ``max_lens[b]`` tokens. The
    next token is the most likely content-or-eos id (``greedy``) or a draw
    from the teacher distribution restricted to those ids (``soft``); its
    confidence is its probability under the full softmax. Returns
    ``(tokens, conf, valid)`` with padding marked False in ``valid``.
    """
    b = enc_final.shape[0]
    device = enc_final.device
    allowed = decoder_candidates(tok).to(device)
    y = torch.full((b, 1), tok.sos_id, dtype=torch.long, device=device)
    finished = max_lens <= 0
    tokens, confs, valids = [], [], []
    for step in range(int(max_lens.max().item()) if b else 0):
        probs = model.next_token_log_probs(enc_final, enc_pad_mask, y).exp()
        sub = probs[:, allowed]
        if sampling == "soft":
            choice = torch.multinomial(sub / sub.sum(dim=-1, keepdim=True), 1, generator=generator).squeeze(1)
        else:
            choice = sub.argmax(dim=-1)
        nxt = allowed[choice]
        conf = sub.gather(1, choice.unsqueeze(1)).squeeze(1)

        active = ~finished
        nxt = torch.where(active, nxt, torch.full_like(nxt, tok.pad_id))
        tokens.append(nxt)
        confs.append(torch.where(active, conf, torch.zeros_like(conf)))
        valids.append(active)
        finished = finished | (active & (nxt == tok.eos_id)) | (step + 1 >= max_lens)
        if bool(finished.all()):
            break
        y = torch.cat([y, nxt.unsqueeze(1)], dim=1)

    if not tokens:
        empty = torch.zeros((b, 0), device=device)
        return empty.long(), empty, empty.bool()
    return torch.stack(tokens, 1), torch.stack(confs, 1), torch.stack(valids, 1)


@torch.no_grad()
def generate_pseudo_labels(
    teacher: TeacherState,
    views: ViewBatch,
    tok: Tokenizer,
    cfg: PseudoConfig,
    tau_ctc: float,
    tau_attn: float,
    generator: Optional[torch.Generator] = None,
) -> PseudoLabelSet:
    """One teacher forward per sample; both pseudo-label streams come from it."""
    enc = teacher.encode_av(views)
    final = enc.final_for(Modality.AV)
    pad = enc.pad_mask_for(Modality.AV)

    frames, ctc_conf = generate_ctc_pseudo(teacher.model, final)
    ctc_valid = ~pad
    ctc_conf = torch.where(ctc_valid, ctc_conf, torch.zeros_like(ctc_conf))

    caps = views.lengths + cfg.max_len_margin
    tokens, attn_conf, attn_valid = generate_attention_pseudo(
        teacher.model, final, pad, caps, tok, cfg.sampling, generator
    )
    labels = PseudoLabelSet(
        ctc_frames=frames, ctc_conf=ctc_conf, ctc_valid=ctc_valid,
        attn_tokens=tokens, attn_conf=attn_conf, attn_valid=attn_valid,
    )
    return labels.apply_threshold(tau_ctc, tau_attn)


@dataclass
class KeptFractionMeter:
    """Kept / total token counts over a logging window, per stream."""
    kept: Dict[str, int] = field(default_factory=lambda: {"ctc": 0, "attn": 0})
    total: Dict[str, int] = field(default_factory=lambda: {"ctc": 0, "attn": 0})
    conf_sum: Dict[str, float] = field(default_factory=lambda: {"ctc": 0.0, "attn": 0.0})

    def add(self, labels: PseudoLabelSet) -> None:
        for stream, kept, valid, conf in (
            ("ctc", labels.ctc_kept, labels.ctc_valid, labels.ctc_conf),
            ("attn", labels.attn_kept, labels.attn_valid, labels.attn_conf),
        ):
            self.kept[stream] += int(kept.sum())
            self.total[stream] += int(valid.sum())
            self.conf_sum[stream] += float(conf[valid].sum())

    def kept_fraction(self, stream: str) -> Optional[float]:
        return kept_fraction(self.kept[stream], self.total[stream])

    def mean_conf(self, stream: str) -> Optional[float]:
        if self.total[stream] == 0:
            return None
        return self.conf_sum[stream] / self.total[stream]

    def reset(self) -> None:
        for d in (self.kept, self.total):
            for k in d:
                d[k] = 0
        for k in self.conf_sum:
            self.conf_sum[k] = 0.0


def kept_fraction(kept: int, total: int) -> Optional[float]:
    """None when nothing was observed, so an empty window is never reported as 0."""
    if total == 0:
        return None
    return kept / total


def masks_kept_fraction(masks: Iterable[torch.Tensor]) -> Optional[float]:
    kept = total = 0
    for m in masks:
        kept += int(m.sum())
        total += int(m.numel())
    return kept_fraction(kept, total)
