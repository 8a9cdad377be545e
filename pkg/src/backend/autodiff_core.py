# src/backend/autodiff_core.py
"""Tensor primitives used by the model and the losses.

Reverse-mode differentiation is torch autograd: every function here builds
ordinary autograd nodes, so gradients accumulate (``+=``) into leaves that are
shared between the three modality paths. The wrappers add the shape and
numeric contracts the rest of the package relies on.
"""
from __future__ import annotations

from typing import Iterable, List, Optional

import torch
import torch.nn.functional as F

from .errors import ContractError, EmptyInputError, NumericError, ShapeError

EPS = 1e-5


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Batched matrix product ``[.., M, K] x [.., K, N] -> [.., M, N]``."""
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    try:
        torch.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except RuntimeError:
        raise ShapeError(
            f"matmul: batch dimensions of {tuple(a.shape)} and {tuple(b.shape)} do not broadcast"
        ) from None
    return torch.matmul(a, b)


def _check_finite(x: torch.Tensor, op: str) -> None:
    if not bool(torch.isfinite(x).all()):
        raise NumericError(f"{op}: input contains non-finite values")


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    # torch subtracts the running max internally, so [1000, 0] does not overflow.
    _check_finite(x, "softmax")
    return torch.softmax(x, dim=axis)


def log_softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    _check_finite(x, "log_softmax")
    return torch.log_softmax(x, dim=axis)


def layer_norm(
    x: torch.Tensor,
    gain: Optional[torch.Tensor] = None,
    bias: Optional[torch.Tensor] = None,
    eps: float = EPS,
) -> torch.Tensor:
    """Normalise over the channel (last) axis, then apply ``gain`` and ``bias``."""
    return F.layer_norm(x, (x.shape[-1],), gain, bias, eps)


def instance_norm(
    x: torch.Tensor,
    lengths: Optional[torch.Tensor] = None,
    eps: float = EPS,
) -> torch.Tensor:
    """Per-channel zero mean / unit variance over time.

    ``x`` is ``[T, C]`` for one sample or ``[B, T, C]`` with ``lengths``; padded
    frames are excluded from the statistics and come back as zeros.
    """
    if x.dim() == 2:
        if x.shape[0] == 0:
            raise EmptyInputError("instance_norm: sequence has no frames")
        mean = x.mean(dim=0, keepdim=True)
        var = x.var(dim=0, unbiased=False, keepdim=True)
        return (x - mean) / torch.sqrt(var + eps)

    if x.dim() != 3:
        raise ShapeError(f"instance_norm: expected [T, C] or [B, T, C], got {tuple(x.shape)}")
    if lengths is None:
        lengths = torch.full((x.shape[0],), x.shape[1], dtype=torch.long, device=x.device)
    if bool((lengths <= 0).any()):
        raise EmptyInputError("instance_norm: a sample in the batch has no frames")

    valid = (torch.arange(x.shape[1], device=x.device)[None, :] < lengths[:, None]).to(x.dtype)
    valid = valid.unsqueeze(-1)
    count = lengths.to(x.dtype).view(-1, 1, 1)
    mean = (x * valid).sum(dim=1, keepdim=True) / count
    var = (((x - mean) * valid) ** 2).sum(dim=1, keepdim=True) / count
    return (x - mean) / torch.sqrt(var + eps) * valid


def backward(loss: torch.Tensor, leaves: Iterable[torch.Tensor]) -> List[torch.Tensor]:
    """Back-propagate a scalar loss and return one gradient per leaf.

    Leaves the loss does not depend on get a zero gradient instead of None.
    Calling this twice on the same graph without a new forward raises.
    """
    if loss.numel() != 1 or loss.dim() != 0:
        raise ContractError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    leaves = list(leaves)
    loss.backward()
    grads: List[torch.Tensor] = []
    for leaf in leaves:
        if leaf.grad is None:
            leaf.grad = torch.zeros_like(leaf)
        grads.append(leaf.grad)
    return grads
