# src/backend/device_utils.py
from __future__ import annotations

import random
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

_PRECISIONS = {
    "float32": torch.float32,
    "float64": torch.float64,
}


@dataclass(frozen=True)
class DeviceConfig:
    device: str
    precision: str

    @property
    def dtype(self) -> torch.dtype:
        return _PRECISIONS[self.precision]


def resolve_device(requested: Optional[str]) -> str:
    """Resolve a device string.

    Supported inputs:
      - None / "auto" / "": prefer CUDA, else CPU
      - "cuda": respected if available; falls back to CPU if not
      - "cpu"
    """
    if requested is None:
        requested = "auto"

    req = str(requested).strip().lower()
    if req in ("", "auto", "cuda"):
        if torch.cuda.is_available():
            return "cuda"
        return "cpu"
    # MPS has no float64 kernels, and the gradient checks need them.
    return "cpu"


def resolve_precision(requested: Optional[str]) -> str:
    """Resolve the floating point precision.

    Rules:
      - None / "auto" / "": float32 (training speed)
      - "float64" / "double": used for oracle and gradient checks
    """
    if requested is None:
        requested = "auto"
    req = str(requested).strip().lower()
    if req in ("", "auto", "float32", "float", "single"):
        return "float32"
    if req in ("float64", "double"):
        return "float64"
    raise ValueError(f"Unsupported precision '{requested}' (expected float32 or float64).")


def resolve_config(device: Optional[str], precision: Optional[str]) -> DeviceConfig:
    return DeviceConfig(device=resolve_device(device), precision=resolve_precision(precision))


def seed_everything(seed: int, deterministic: bool = True) -> None:
    """Seed python, numpy and torch. In deterministic mode torch runs single-threaded."""
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)
