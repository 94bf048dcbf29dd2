"""End-to-end compression: whiten, select, reconstruct, correct, quantize, report."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import __version__, toynet
from .correct import CorrectionCfg, correct_iterate, rank_energy_report
from .model import CompressedModel, DenseLayer, FactoredLayer, ToyModel
from .quant import quantize_symmetric
from .select import (
    BudgetMode,
    RankAssignment,
    Strategy,
    apply_assignment,
    homogeneous_baseline,
    hq_plan,
    max_cost,
    run_strategy,
)
from .toynet import CalibSet
from .whiten import RidgeConfig, WhitenedLayer, build_layer

MODES = ("standard", "remap", "hq", "exact")

# Nominal deployment precision used for footprint accounting (fp16 parameters
# and fp16 quantization scales).
PARAM_BYTES = 2
SCALE_BYTES = 2


@dataclass(frozen=True)
class CompressConfig:
    ratio: float
    mode: str = "standard"
    strategy: Strategy = field(default_factory=Strategy)
    correction: CorrectionCfg = field(default_factory=CorrectionCfg)
    ridge: RidgeConfig = field(default_factory=RidgeConfig)
    tau: float = 0.95
    baseline: bool = False  # homogeneous closed-form ranks instead of global selection

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 < self.ratio <= 1.0:
            raise ValueError(f"ratio must lie in (0, 1], got {self.ratio}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")

    @property
    def budget_mode(self) -> BudgetMode:
        return {"remap": BudgetMode.REMAP, "exact": BudgetMode.EXACT}.get(self.mode, BudgetMode.STANDARD)


@dataclass
class CompressResult:
    model: CompressedModel
    assignment: RankAssignment
    layers: list[WhitenedLayer]
    report: dict


def whiten_model(model: ToyModel, calib: CalibSet, ridge: RidgeConfig = RidgeConfig()) -> list[WhitenedLayer]:
    caps = toynet.backward(model, calib)
    return [
        build_layer(i, layer.matrix(), cap.x, cap.g, ridge)
        for i, (layer, cap) in enumerate(zip(model.layers, caps))
    ]


def quantize_layers(model: CompressedModel, which: str) -> CompressedModel:
    """``which="all"`` quantizes every target matrix, ``"wv"`` only the right factors."""
    out = []
    for layer in model.layers:
        if isinstance(layer, FactoredLayer):
            wu = quantize_symmetric(layer.wu) if which == "all" and layer.rank else layer.wu
            wv = quantize_symmetric(layer.wv) if layer.rank else layer.wv
            out.append(FactoredLayer(wu, wv, layer.bias))
        elif which == "all":
            out.append(DenseLayer(quantize_symmetric(layer.weight), layer.bias))
        else:
            out.append(layer)
    return CompressedModel(model.spec, out, dict(model.notes))


def footprint_bytes(model: ToyModel, mode: str) -> float:
    total = 0.0
    for layer in model.layers:
        if mode == "remap" and isinstance(layer, FactoredLayer):
            # packed layout: one fp16-equivalent column of length max(m, n) per component
            total += PARAM_BYTES * layer.rank * max(layer.shape)
        else:
            total += layer.footprint(PARAM_BYTES, SCALE_BYTES)
    return total


def stored_bytes(model: ToyModel) -> int:
    """Bytes of matrix payload as actually held (float64 or int8 codes + float64 scales)."""
    total = 0
    for layer in model.layers:
        mats = [layer.wu, layer.wv] if isinstance(layer, FactoredLayer) else [layer.weight]
        for mat in mats:
            if hasattr(mat, "scales"):
                total += mat.q.size + 8 * mat.scales.size
            else:
                total += 8 * mat.size
    return total


def _spectrum_summary(sig: np.ndarray) -> dict:
    return {
        "max": float(sig[0]),
        "min": float(sig[-1]),
        "sum_sq": float(np.sum(sig**2)),
        "count": int(sig.size),
    }


def compress(model: ToyModel, calib: CalibSet, cfg: CompressConfig, seeds: dict | None = None) -> CompressResult:
    layers = whiten_model(model, calib, cfg.ridge)
    bits = 0
    selection_ratio = cfg.ratio
    if cfg.mode == "hq":
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            selection_ratio, bits, _ = hq_plan(cfg.ratio)
        for w in caught:
            warnings.warn(w.message, w.category, stacklevel=2)
    elif cfg.mode == "remap":
        bits = 8

    if cfg.baseline:
        assignment = homogeneous_baseline(layers, selection_ratio)
    else:
        assignment = run_strategy(layers, cfg.budget_mode, selection_ratio, cfg.strategy)
    compressed = apply_assignment(model, layers, assignment)
    loss_selected = toynet.evaluate(compressed, calib)[0]
    compressed = correct_iterate(model, layers, assignment, calib, cfg.correction, compressed)
    loss_corrected = toynet.evaluate(compressed, calib)[0]
    if cfg.mode == "hq":
        compressed = quantize_layers(compressed, "all")
    elif cfg.mode == "remap":
        compressed = quantize_layers(compressed, "wv")

    energy = rank_energy_report(compressed, calib, cfg.tau)
    report = build_report(
        model, compressed, calib, cfg, assignment, layers,
        selection_ratio=selection_ratio, bits=bits,
        loss_selected=loss_selected, loss_corrected=loss_corrected,
        energy=energy, seeds=seeds or {},
    )
    return CompressResult(compressed, assignment, layers, report)


def build_report(
    model: ToyModel,
    compressed: CompressedModel,
    calib: CalibSet,
    cfg: CompressConfig,
    assignment: RankAssignment,
    layers: Sequence[WhitenedLayer],
    *,
    selection_ratio: float,
    bits: int,
    loss_selected: float,
    loss_corrected: float,
    energy,
    seeds: dict,
) -> dict:
    loss_before, ppl_before = toynet.evaluate(model, calib)
    loss_after, ppl_after = toynet.evaluate(compressed, calib)
    per_layer = []
    for i, (wl, layer) in enumerate(zip(layers, compressed.layers)):
        m, n = wl.shape
        removed = assignment.removed[i]
        per_layer.append({
            "layer": i,
            "shape": [m, n],
            "rank": assignment.ranks[i],
            "full_rank": wl.r,
            "k_thr": wl.k_thr,
            "dense": bool(assignment.dense[i]),
            "params": layer.n_params(),
            "max_cost": max_cost(cfg.budget_mode, m, n),
            "lambda": wl.lambda_used,
            "sigma": _spectrum_summary(wl.sigma),
            "removed": [int(c) for c in removed],
            "removed_delta_l": [float(wl.delta_l[c]) for c in removed],
            "predicted_delta_l": float(sum(wl.delta_l[c] for c in removed)),
        })
    params_before = model.n_params()
    params_after = compressed.n_params()
    fp_before = PARAM_BYTES * params_before
    fp_after = footprint_bytes(compressed, cfg.mode)
    notes = compressed.notes
    return {
        "version": __version__,
        "seeds": seeds,
        "mode": cfg.mode,
        "ratio": cfg.ratio,
        "selection_ratio": selection_ratio,
        "quantize_bits": bits,
        "strategy": assignment.strategy,
        "budget": {
            "total": assignment.budget_total,
            "used": assignment.budget_used,
            "exhausted": assignment.exhausted,
            "trace": [[t.layer_id, t.comp, t.dl, t.cost, t.s, t.b] for t in assignment.trace],
        },
        "drift": assignment.predicted_drift,
        "params": {"before": params_before, "after": params_after, "ratio": params_after / params_before},
        "footprint": {
            "before": fp_before,
            "after": fp_after,
            "ratio": fp_after / fp_before,
            "param_bytes": PARAM_BYTES,
            "scale_bytes": SCALE_BYTES,
            "simulated": cfg.mode == "remap",
        },
        "stored_bytes": {"before": 8 * params_before, "after": stored_bytes(compressed)},
        "loss": {
            "before": loss_before,
            "selected": loss_selected,
            "corrected": loss_corrected,
            "after": loss_after,
            "history": notes.get("loss_history", []),
        },
        "perplexity": {"before": ppl_before, "after": ppl_after},
        "correction": {
            "variant": cfg.correction.variant.value,
            "iters": cfg.correction.iters,
            "calib_subset": cfg.correction.calib_subset,
            "alpha": cfg.correction.alpha,
            "eta": cfg.correction.eta,
            "zero_gradient_layers": notes.get("zero_gradient_layers", []),
        },
        "ridge": {"rel": cfg.ridge.rel, "floor": cfg.ridge.floor},
        "rank_energy": {
            "tau": energy.tau,
            "layers": [
                {"layer": e.layer, "k_tau_weight": e.k_tau_weight, "k_tau_grad": e.k_tau_grad,
                 "ratio": e.ratio, "skipped": e.skipped}
                for e in energy.layers
            ],
        },
        "calib_tokens": calib.t,
        "layers": per_layer,
    }
