"""Symmetric per-tensor int8 weight quantization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class QuantizedTensor:
    values: np.ndarray  # int8, original shape
    scale: float

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(self.values.shape)


def quantize_int8(w: torch.Tensor | np.ndarray) -> QuantizedTensor:
    """scale = max|w| / 127, q = clamp(round(w / scale), -127, 127).  All-zero tensors get scale 1."""
    a = w.detach().cpu().double().numpy() if isinstance(w, torch.Tensor) else np.asarray(w, np.float64)
    if not np.isfinite(a).all():
        raise ValueError("cannot quantize non-finite values")
    peak = float(np.abs(a).max()) if a.size else 0.0
    scale = peak / 127.0 if peak > 0 else 1.0
    q = np.clip(np.rint(a / scale), -127, 127).astype(np.int8)
    return QuantizedTensor(q, scale)


def dequantize(qt: QuantizedTensor, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    return torch.from_numpy(qt.values.astype(np.float64) * qt.scale).to(dtype)
