"""Symmetric per-row 8-bit quantization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

QMAX = 127


@dataclass(frozen=True)
class QuantTensor:
    q: np.ndarray       # int8 codes, same shape as the source matrix
    scales: np.ndarray  # float64, one per row

    @property
    def shape(self) -> tuple[int, int]:
        return self.q.shape

    def dequantize(self) -> np.ndarray:
        return dequantize(self)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_symmetric(w, bits: int = 8) -> QuantTensor:
    """Per-row scale ``max|row| / 127``; all-zero rows get scale 1."""
    if bits != 8:
        raise ValueError(f"only 8-bit quantization is supported, got {bits}")
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("cannot quantize non-finite entries")
    amax = np.max(np.abs(w), axis=1, initial=0.0)
    scales = np.where(amax > 0, amax / QMAX, 1.0)
    codes = np.clip(round_half_away(w / scales[:, None]), -QMAX, QMAX)
    return QuantTensor(codes.astype(np.int8), scales)


def dequantize(qt: QuantTensor) -> np.ndarray:
    return qt.q.astype(np.float64) * qt.scales[:, None]
