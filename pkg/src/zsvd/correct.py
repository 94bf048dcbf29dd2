"""Truncate, correct, re-truncate.

After selection each factored matrix sits on its rank-k manifold. A correction
round takes one gradient at the truncated point, moves each matrix off the
manifold by a variant-specific update, then projects it back to rank k in the
layer's original whitened coordinates.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from . import toynet
from .linalg import effective_rank, frob_inner
from .model import CompressedModel, FactoredLayer, ToyModel
from .select import RankAssignment
from .toynet import CalibSet
from .whiten import WhitenedLayer, retruncate


class Variant(enum.Enum):
    PROJ_GRAD = "proj-grad"
    ALPHA_BLEND = "alpha"
    GD_STEP = "gd"
    PROJ_DELTA = "proj-delta"


@dataclass(frozen=True)
class CorrectionCfg:
    variant: Variant = Variant.PROJ_GRAD
    iters: int = 0
    calib_subset: int = 0   # tokens per round, 0 = full calibration set
    alpha: float = 0.5
    eta: float = 1e-3

    def __post_init__(self):
        if self.iters < 0:
            raise ValueError(f"iters must be >= 0, got {self.iters}")
        if self.calib_subset < 0:
            raise ValueError(f"calib_subset must be >= 0, got {self.calib_subset}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.eta <= 0:
            raise ValueError(f"eta must be positive, got {self.eta}")


def project_correction(g, delta_w) -> np.ndarray:
    """Minimum-norm ``D`` with ``<g, D> == <g, delta_w>``: the projection of ``delta_w`` onto ``g``.

    A zero gradient yields a zero correction.
    """
    g = np.asarray(g, dtype=np.float64)
    delta_w = np.asarray(delta_w, dtype=np.float64)
    gg = frob_inner(g, g)
    if gg == 0.0:
        return np.zeros_like(delta_w)
    return (frob_inner(g, delta_w) / gg) * g


def variant_update(cfg: CorrectionCfg, w_orig, w_trunc, g) -> np.ndarray:
    w_orig = np.asarray(w_orig, dtype=np.float64)
    w_trunc = np.asarray(w_trunc, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if not (w_orig.shape == w_trunc.shape == g.shape):
        raise ValueError(f"shape mismatch: {w_orig.shape}, {w_trunc.shape}, {g.shape}")
    v = cfg.variant
    if v is Variant.ALPHA_BLEND:
        return (1.0 - cfg.alpha) * w_trunc + cfg.alpha * w_orig
    if v is Variant.GD_STEP:
        return w_trunc - cfg.eta * g
    delta = w_orig - w_trunc
    if v is Variant.PROJ_DELTA:
        dd = frob_inner(delta, delta)
        if dd == 0.0:
            return w_trunc.copy()
        return w_trunc + (frob_inner(g, delta) / dd) * delta
    return w_trunc + project_correction(g, delta)


def correct_iterate(
    model_orig: ToyModel,
    layers: Sequence[WhitenedLayer],
    assignment: RankAssignment,
    calib: CalibSet,
    cfg: CorrectionCfg,
    compressed: CompressedModel,
) -> CompressedModel:
    """Run ``cfg.iters`` correction rounds; dense-fallback layers are left alone.

    The per-round calibration loss (before the first round, then after each)
    is recorded in ``notes["loss_history"]`` of the returned model.
    """
    if cfg.iters == 0:
        return compressed
    batch = calib.subset(cfg.calib_subset)
    current = CompressedModel(compressed.spec, list(compressed.layers), dict(compressed.notes))
    history = [toynet.evaluate(current, batch)[0]]
    degenerate = []
    for _ in range(cfg.iters):
        caps = toynet.backward(current, batch)
        new_layers = list(current.layers)
        for i, layer in enumerate(current.layers):
            if not isinstance(layer, FactoredLayer):
                continue
            g = caps[i].g
            if not np.any(g):
                degenerate.append(i)
            w_plus = variant_update(cfg, model_orig.layers[i].matrix(), layer.matrix(), g)
            wu, wv = retruncate(w_plus, layers[i], assignment.ranks[i])
            new_layers[i] = FactoredLayer(wu, wv, layer.bias)
        current = CompressedModel(current.spec, new_layers, current.notes)
        history.append(toynet.evaluate(current, batch)[0])
    current.notes["loss_history"] = history
    current.notes["correction"] = {"variant": cfg.variant.value, "iters": cfg.iters}
    if degenerate:
        current.notes["zero_gradient_layers"] = sorted(set(degenerate))
    return current


@dataclass
class LayerRankEnergy:
    layer: int
    k_tau_weight: int
    k_tau_grad: int
    ratio: float
    skipped: bool = False


@dataclass
class RankEnergyReport:
    tau: float
    layers: list[LayerRankEnergy] = field(default_factory=list)


def _clean_spectrum(a: np.ndarray) -> np.ndarray:
    # Values at round-off level are treated as exact zeros.
    sig = scipy.linalg.svdvals(a)
    if sig.size and sig[0] > 0:
        sig = np.where(sig <= np.finfo(float).eps * max(a.shape) * sig[0], 0.0, sig)
    return sig


def rank_energy_report(compressed: ToyModel, calib: CalibSet, tau: float = 0.95) -> RankEnergyReport:
    """Effective rank of each factored weight and of its loss gradient at threshold ``tau``."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    caps = toynet.backward(compressed, calib)
    report = RankEnergyReport(tau)
    for i, layer in enumerate(compressed.layers):
        if not isinstance(layer, FactoredLayer) or layer.rank == 0:
            continue
        sw = _clean_spectrum(layer.matrix())
        sg = _clean_spectrum(caps[i].g)
        if not np.any(sg) or not np.any(sw):
            report.layers.append(LayerRankEnergy(i, 0, 0, float("nan"), skipped=True))
            continue
        kw = effective_rank(sw, tau)
        kg = effective_rank(sg, tau)
        report.layers.append(LayerRankEnergy(i, kw, kg, kg / kw))
    return report
