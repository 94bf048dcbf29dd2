"""Desk-scale layered network: calibration data, loss, exact gradients.

Tokens are columns: a calibration batch is an ``n0 x T`` matrix. Every layer
computes ``z = W h + b`` and all but the last apply a smooth activation. The
loss is the token-mean softmax cross-entropy, so ``exp(loss)`` plays the role
of perplexity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ShapeError
from .model import DenseLayer, ModelSpec, ToyModel

_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class CalibSet:
    inputs: np.ndarray  # n0 x T
    labels: np.ndarray  # T ints

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.inputs.shape[1] < 1:
            raise ShapeError(f"inputs must be n0 x T with T >= 1, got {self.inputs.shape}")
        if self.labels.shape != (self.inputs.shape[1],):
            raise ShapeError("one label per token required")

    @property
    def t(self) -> int:
        return self.inputs.shape[1]

    def subset(self, count: int) -> "CalibSet":
        """First ``count`` tokens (0 or >= T keeps everything)."""
        if count <= 0 or count >= self.t:
            return self
        return CalibSet(self.inputs[:, :count], self.labels[:count])


class LayerCapture(NamedTuple):
    x: np.ndarray  # input activations to the layer, n_in x T
    g: np.ndarray  # gradient of the mean loss w.r.t. the layer's weight
    g_bias: np.ndarray


class Forward(NamedTuple):
    loss: float
    inputs: list[np.ndarray]       # per layer input activations
    preacts: list[np.ndarray]      # per layer z
    probs: np.ndarray              # classes x T


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    return 0.5 * z * (1.0 + np.tanh(_GELU_C * (z + 0.044715 * z**3)))


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - np.tanh(z) ** 2
    inner = _GELU_C * (z + 0.044715 * z**3)
    th = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * z**2)
    return 0.5 * (1.0 + th) + 0.5 * z * (1.0 - th**2) * dinner


def build_model(spec: ModelSpec) -> ToyModel:
    rng = np.random.default_rng(spec.seed)
    layers = []
    for m, n in spec.shapes():
        w = rng.standard_normal((m, n)) / math.sqrt(n)
        b = 0.1 * rng.standard_normal(m)
        layers.append(DenseLayer(w, b))
    return ToyModel(spec, layers)


def gen_calibration(
    spec: ModelSpec, teacher_seed: int, t: int, input_seed: int | None = None
) -> CalibSet:
    """Unit-variance noise inputs labelled by the argmax of a seeded teacher.

    ``input_seed`` drives the noise; by default it is derived from the teacher
    seed. A teacher seed equal to ``spec.seed`` labels the data with the model
    itself, which puts the model in the regime of a fitted network.
    """
    if t < 1:
        raise ValueError(f"token count must be >= 1, got {t}")
    teacher = build_model(ModelSpec(spec.dims, spec.activation, teacher_seed))
    noise_seed = [teacher_seed, 0x5EED] if input_seed is None else [input_seed, 0x1A7A]
    rng = np.random.default_rng(noise_seed)
    inputs = rng.standard_normal((spec.dims[0], t))
    logits = _logits(teacher, inputs)
    labels = np.argmax(logits, axis=0).astype(np.int64)
    return CalibSet(inputs, labels)


def _logits(model: ToyModel, h: np.ndarray) -> np.ndarray:
    act = model.spec.activation
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        h = layer.apply(h) + layer.bias[:, None]
        if i < last:
            h = _act(act, h)
    return h


def _check(model: ToyModel, calib: CalibSet) -> None:
    if len(model.layers) != model.spec.n_layers:
        raise ShapeError("layer count does not match the model spec")
    for (m, n), layer in zip(model.spec.shapes(), model.layers):
        if layer.shape != (m, n):
            raise ShapeError(f"layer shape {layer.shape} does not match spec {(m, n)}")
    if calib.inputs.shape[0] != model.spec.dims[0]:
        raise ShapeError(
            f"calibration inputs have width {calib.inputs.shape[0]}, model expects {model.spec.dims[0]}"
        )
    if calib.labels.min() < 0 or calib.labels.max() >= model.spec.classes:
        raise ShapeError("labels outside [0, classes)")


def _forward(model: ToyModel, calib: CalibSet) -> Forward:
    _check(model, calib)
    act = model.spec.activation
    h = calib.inputs
    inputs, preacts = [], []
    last = len(model.layers) - 1
    for i, layer in enumerate(model.layers):
        inputs.append(h)
        z = layer.apply(h) + layer.bias[:, None]
        preacts.append(z)
        h = _act(act, z) if i < last else z
    shifted = h - h.max(axis=0, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=0))
    t = calib.t
    logp_true = shifted[calib.labels, np.arange(t)] - logsum
    loss = float(-np.mean(logp_true))
    probs = np.exp(shifted - logsum)
    return Forward(loss, inputs, preacts, probs)


def forward_loss(model: ToyModel, calib: CalibSet) -> tuple[float, list[np.ndarray]]:
    fw = _forward(model, calib)
    return fw.loss, fw.inputs


def backward(model: ToyModel, calib: CalibSet) -> list[LayerCapture]:
    """Exact reverse-mode gradients of the mean loss w.r.t. every weight matrix.

    For factored layers the gradient is taken w.r.t. the materialized product
    ``wu @ wv``; backpropagation through them never forms that product.
    """
    fw = _forward(model, calib)
    t = calib.t
    dz = fw.probs.copy()
    dz[calib.labels, np.arange(t)] -= 1.0
    dz /= t
    act = model.spec.activation
    caps: list[LayerCapture] = [None] * len(model.layers)  # type: ignore[list-item]
    for i in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[i]
        x = fw.inputs[i]
        caps[i] = LayerCapture(x, dz @ x.T, dz.sum(axis=1))
        if i > 0:
            dz = layer.apply_t(dz) * _act_grad(act, fw.preacts[i - 1])
    return caps


def evaluate(model: ToyModel, calib: CalibSet) -> tuple[float, float]:
    """Return ``(loss, perplexity)``."""
    loss = _forward(model, calib).loss
    return loss, math.exp(loss)
