"""Network containers: layer variants, the dense toy model and its compressed form."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .quant import QuantTensor

ACTIVATIONS = ("gelu_tanh", "tanh")

Matrix = Union[np.ndarray, QuantTensor]


def _mat(x: Matrix) -> np.ndarray:
    return x.dequantize() if isinstance(x, QuantTensor) else x


def _nbytes(x: Matrix, param_bytes: float, scale_bytes: float) -> float:
    if isinstance(x, QuantTensor):
        return x.q.size * 1 + x.scales.size * scale_bytes
    return x.size * param_bytes


@dataclass(frozen=True)
class ModelSpec:
    dims: tuple[int, ...]
    activation: str = "gelu_tanh"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.dims) < 3:
            raise ValueError(f"need at least two layers, got dims {self.dims}")
        if any(d < 1 for d in self.dims):
            raise ValueError(f"every width must be >= 1, got {self.dims}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def classes(self) -> int:
        return self.dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    def shapes(self) -> list[tuple[int, int]]:
        return [(self.dims[i + 1], self.dims[i]) for i in range(self.n_layers)]


@dataclass
class DenseLayer:
    weight: Matrix
    bias: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.weight.shape

    def matrix(self) -> np.ndarray:
        return _mat(self.weight)

    def apply(self, h: np.ndarray) -> np.ndarray:
        return _mat(self.weight) @ h

    def apply_t(self, dz: np.ndarray) -> np.ndarray:
        return _mat(self.weight).T @ dz

    def n_params(self) -> int:
        m, n = self.shape
        return m * n

    def footprint(self, param_bytes: float = 2, scale_bytes: float = 2) -> float:
        return _nbytes(self.weight, param_bytes, scale_bytes)


@dataclass
class FactoredLayer:
    """``W ~= wu @ wv``; applied as ``wu @ (wv @ h)`` so the product is never formed."""

    wu: Matrix
    wv: Matrix
    bias: np.ndarray

    @property
    def rank(self) -> int:
        return self.wu.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.wu.shape[0], self.wv.shape[1])

    def matrix(self) -> np.ndarray:
        return _mat(self.wu) @ _mat(self.wv)

    def apply(self, h: np.ndarray) -> np.ndarray:
        return _mat(self.wu) @ (_mat(self.wv) @ h)

    def apply_t(self, dz: np.ndarray) -> np.ndarray:
        return _mat(self.wv).T @ (_mat(self.wu).T @ dz)

    def n_params(self) -> int:
        m, n = self.shape
        return self.rank * (m + n)

    def footprint(self, param_bytes: float = 2, scale_bytes: float = 2) -> float:
        return _nbytes(self.wu, param_bytes, scale_bytes) + _nbytes(self.wv, param_bytes, scale_bytes)


Layer = Union[DenseLayer, FactoredLayer]


@dataclass
class ToyModel:
    spec: ModelSpec
    layers: list[Layer]

    @property
    def weights(self) -> list[np.ndarray]:
        return [layer.matrix() for layer in self.layers]

    @property
    def biases(self) -> list[np.ndarray]:
        return [layer.bias for layer in self.layers]

    def n_params(self) -> int:
        return sum(layer.n_params() for layer in self.layers)


@dataclass
class CompressedModel(ToyModel):
    """A toy model whose target matrices may be factored and/or quantized."""

    notes: dict = field(default_factory=dict)

    def is_factored(self, i: int) -> bool:
        return isinstance(self.layers[i], FactoredLayer)
