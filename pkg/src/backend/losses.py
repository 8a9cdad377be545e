# src/backend/losses.py
"""Supervised and pseudo-label losses and their weighted aggregates.

Every function is a pure function of tensors; graph construction (which
model outputs feed which loss) lives in ``training``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F

from .autodiff_core import log_softmax
from .errors import ConfigError, ContractError, ShapeError
from .model import ALL_MODALITIES, Modality

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    lambda_ctc: float = 0.1
    lambda_v: float = 0.3
    gamma_a: float = 0.5
    gamma_v: float = 0.2
    tau: float = 0.8
    tau_ctc: Optional[float] = None
    tau_attn: Optional[float] = None

    def __post_init__(self) -> None:
        for name in ("lambda_ctc", "lambda_v", "gamma_a", "gamma_v", "tau", "tau_ctc", "tau_attn"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                raise ConfigError(f"loss.{name} must be in [0, 1], got {value}")

    @property
    def ctc_threshold(self) -> float:
        return self.tau if self.tau_ctc is None else self.tau_ctc

    @property
    def attn_threshold(self) -> float:
        return self.tau if self.tau_attn is None else self.tau_attn


@dataclass
class ModalityLoss:
    ctc: torch.Tensor
    attention: torch.Tensor
    combined: torch.Tensor


PerModalityLosses = Dict[Modality, ModalityLoss]


@dataclass
class CTCBatchLoss:
    loss: torch.Tensor  # mean over feasible samples
    skipped: int


def ctc_feasible(labels: Sequence[int], num_frames: int) -> bool:
    """T >= U + number of adjacent repeats (each repeat needs a blank between)."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return num_frames >= len(labels) + repeats


def _ctc_per_sample(
    log_probs: torch.Tensor,
    input_lengths: torch.Tensor,
    labels: Sequence[Sequence[int]],
    blank_id: int,
) -> torch.Tensor:
    width = max(1, max((len(l) for l in labels), default=0))
    targets = torch.zeros((len(labels), width), dtype=torch.long, device=log_probs.device)
    for i, l in enumerate(labels):
        if l:
            targets[i, : len(l)] = torch.as_tensor(list(l), dtype=torch.long)
    target_lengths = torch.tensor([len(l) for l in labels], dtype=torch.long, device=log_probs.device)
    return F.ctc_loss(
        log_probs.transpose(0, 1), targets, input_lengths, target_lengths,
        blank=blank_id, reduction="none", zero_infinity=False,
    )


def ctc_loss(log_probs: torch.Tensor, labels: Sequence[int], blank_id: int) -> torch.Tensor:
    """-log of the total probability of every alignment collapsing to ``labels``.

    ``log_probs`` is ``[T, vocab]``. Infeasible label lengths give ``inf``.
    """
    if blank_id in labels:
        raise ContractError("ctc_loss: labels must not contain the blank id")
    t = log_probs.shape[0]
    if not ctc_feasible(labels, t):
        return torch.tensor(float("inf"), dtype=log_probs.dtype, device=log_probs.device)
    lengths = torch.tensor([t], dtype=torch.long, device=log_probs.device)
    return _ctc_per_sample(log_probs.unsqueeze(0), lengths, [list(labels)], blank_id)[0]


def batch_ctc_loss(
    log_probs: torch.Tensor,
    lengths: torch.Tensor,
    labels: Sequence[Sequence[int]],
    blank_id: int,
) -> CTCBatchLoss:
    """Mean CTC loss over a padded batch; infeasible samples are skipped and counted."""
    keep = [i for i, l in enumerate(labels) if ctc_feasible(l, int(lengths[i]))]
    skipped = len(labels) - len(keep)
    if skipped:
        logger.warning("Skipping %d sample(s) with infeasible CTC label length", skipped)
    if not keep:
        return CTCBatchLoss(loss=log_probs.sum() * 0.0, skipped=skipped)
    idx = torch.tensor(keep, dtype=torch.long, device=log_probs.device)
    per_sample = _ctc_per_sample(log_probs[idx], lengths[idx], [labels[i] for i in keep], blank_id)
    return CTCBatchLoss(loss=per_sample.mean(), skipped=skipped)


def teacher_forcing_pair(
    targets: Sequence[Sequence[int]],
    sos_id: int,
    pad_id: int,
    device="cpu",
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Decoder input ``sos + targets[:-1]`` and output ``targets``, padded.

    Returns ``(y_in, y_out, pad_mask)`` with ``pad_mask`` True on padding.
    """
    width = max(1, max(len(t) for t in targets))
    y_in = torch.full((len(targets), width), pad_id, dtype=torch.long, device=device)
    y_out = torch.full((len(targets), width), pad_id, dtype=torch.long, device=device)
    for i, t in enumerate(targets):
        t = list(t)
        if not t:
            continue
        y_in[i, : len(t)] = torch.as_tensor([sos_id] + t[:-1], dtype=torch.long)
        y_out[i, : len(t)] = torch.as_tensor(t, dtype=torch.long)
    return y_in, y_out, y_out == pad_id


def attention_ce_loss(
    logits: torch.Tensor,
    targets: torch.Tensor,
    pad_mask: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Summed token cross-entropy per sample, averaged over the batch.

    ``logits`` is ``[L, V]`` or ``[B, L, V]``; ``targets`` the matching ids
    (labels followed by eos).
    """
    if logits.dim() == 2:
        logits, targets = logits.unsqueeze(0), targets.unsqueeze(0)
        pad_mask = None if pad_mask is None else pad_mask.unsqueeze(0)
    if logits.shape[:2] != targets.shape:
        raise ShapeError(
            f"attention_ce_loss: logits {tuple(logits.shape)} do not match targets {tuple(targets.shape)}"
        )
    keep = torch.ones_like(targets, dtype=logits.dtype) if pad_mask is None else (~pad_mask).to(logits.dtype)
    safe = targets.clamp(0, logits.shape[-1] - 1)
    nll = -log_softmax(logits, axis=-1).gather(-1, safe.unsqueeze(-1)).squeeze(-1)
    return (nll * keep).sum(dim=1).mean()


def combine_modality(ctc: torch.Tensor, attention: torch.Tensor, w: LossWeights) -> torch.Tensor:
    return w.lambda_ctc * ctc + (1.0 - w.lambda_ctc) * attention


def require_modalities(per_mod: Mapping[Modality, object], what: str) -> None:
    missing = [m.value for m in ALL_MODALITIES if m not in per_mod]
    if missing:
        raise ContractError(f"{what}: missing modality loss(es): {', '.join(missing)}")


def _value(x):
    return x.combined if isinstance(x, ModalityLoss) else x


def supervised_loss(per_mod: Mapping[Modality, object], w: LossWeights) -> torch.Tensor:
    """lambda_v * L_v + (1 - lambda_v) * (L_a + L_av)."""
    require_modalities(per_mod, "supervised_loss")
    v, a, av = (_value(per_mod[m]) for m in ALL_MODALITIES)
    return w.lambda_v * v + (1.0 - w.lambda_v) * (a + av)


def _masked_token_ce(
    log_probs: torch.Tensor,
    targets: torch.Tensor,
    mask: torch.Tensor,
    normalisation: str,
) -> torch.Tensor:
    mask = mask.to(log_probs.dtype)
    safe = targets.clamp(0, log_probs.shape[-1] - 1)
    nll = -log_probs.gather(-1, safe.unsqueeze(-1)).squeeze(-1)
    per_sample = (nll * mask).sum(dim=1)
    if normalisation == "kept":
        kept = mask.sum(dim=1)
        per_sample = torch.where(kept > 0, per_sample / kept.clamp(min=1.0), torch.zeros_like(per_sample))
    elif normalisation != "none":
        raise ConfigError(f"unknown unlabelled-loss normalisation {normalisation!r}")
    return per_sample.mean()


def unlabelled_ctc_loss(
    student_log_probs: torch.Tensor,
    teacher_frames: torch.Tensor,
    conf_mask: torch.Tensor,
    normalisation: str = "kept",
) -> torch.Tensor:
    """Frame-wise cross-entropy against the teacher's per-frame argmax, masked by confidence."""
    if student_log_probs.dim() == 2:
        student_log_probs = student_log_probs.unsqueeze(0)
        teacher_frames, conf_mask = teacher_frames.unsqueeze(0), conf_mask.unsqueeze(0)
    if student_log_probs.shape[:2] != teacher_frames.shape or teacher_frames.shape != conf_mask.shape:
        raise ContractError(
            f"unlabelled_ctc_loss: student frames {tuple(student_log_probs.shape[:2])} vs "
            f"teacher frames {tuple(teacher_frames.shape)} / mask {tuple(conf_mask.shape)}"
        )
    return _masked_token_ce(student_log_probs, teacher_frames, conf_mask, normalisation)


def unlabelled_attention_loss(
    student_logits: torch.Tensor,
    pseudo_tokens: torch.Tensor,
    conf_mask: torch.Tensor,
    normalisation: str = "kept",
) -> torch.Tensor:
    """Token cross-entropy of the teacher-forced student against pseudo tokens, masked by confidence."""
    if student_logits.dim() == 2:
        student_logits = student_logits.unsqueeze(0)
        pseudo_tokens, conf_mask = pseudo_tokens.unsqueeze(0), conf_mask.unsqueeze(0)
    if student_logits.shape[:2] != pseudo_tokens.shape or pseudo_tokens.shape != conf_mask.shape:
        raise ShapeError(
            f"unlabelled_attention_loss: logits {tuple(student_logits.shape)} vs "
            f"tokens {tuple(pseudo_tokens.shape)} / mask {tuple(conf_mask.shape)}"
        )
    return _masked_token_ce(log_softmax(student_logits, axis=-1), pseudo_tokens, conf_mask, normalisation)


def semi_loss(
    labelled: Mapping[Modality, object],
    unlabelled: Mapping[Modality, object],
    w: LossWeights,
) -> torch.Tensor:
    """Labelled and pseudo-labelled losses mixed by gamma_v / gamma_a per modality group."""
    require_modalities(labelled, "semi_loss (labelled)")
    require_modalities(unlabelled, "semi_loss (unlabelled)")
    lv, la, lav = (_value(labelled[m]) for m in ALL_MODALITIES)
    uv, ua, uav = (_value(unlabelled[m]) for m in ALL_MODALITIES)
    return (
        w.gamma_v * w.lambda_v * lv
        + w.gamma_a * (1.0 - w.lambda_v) * (la + lav)
        + (1.0 - w.gamma_v) * w.lambda_v * uv
        + (1.0 - w.gamma_a) * (1.0 - w.lambda_v) * (ua + uav)
    )


def modality_loss(ctc: torch.Tensor, attention: torch.Tensor, w: LossWeights) -> ModalityLoss:
    return ModalityLoss(ctc=ctc, attention=attention, combined=combine_modality(ctc, attention, w))


def loss_values(per_mod: Mapping[Modality, ModalityLoss]) -> Dict[str, float]:
    """Flatten for logging: ``{"v/ctc": ..., "v/attention": ..., ...}``."""
    out: Dict[str, float] = {}
    for m, l in per_mod.items():
        out[f"{m.value}/ctc"] = l.ctc.item()
        out[f"{m.value}/attention"] = l.attention.item()
        out[f"{m.value}/combined"] = l.combined.item()
    return out


__all__: List[str] = [
    "LossWeights", "ModalityLoss", "PerModalityLosses", "CTCBatchLoss",
    "ctc_feasible", "ctc_loss", "batch_ctc_loss", "teacher_forcing_pair", "attention_ce_loss",
    "combine_modality", "supervised_loss", "unlabelled_ctc_loss", "unlabelled_attention_loss",
    "semi_loss", "modality_loss", "loss_values", "require_modalities",
]
