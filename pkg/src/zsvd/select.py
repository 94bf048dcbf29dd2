"""Global budgeted selection of singular components.

The zero-sum rule keeps two min-heaps of candidates split by the sign of their
predicted loss change. Each matrix offers exactly one candidate at a time (its
smallest remaining singular value); at every step the selector pops from the
heap whose sign opposes the running sum ``s`` of predicted changes.
"""

from __future__ import annotations

import enum
import heapq
import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .model import CompressedModel, DenseLayer, FactoredLayer, ToyModel
from .whiten import WhitenedLayer, reconstruct


class BudgetMode(enum.Enum):
    STANDARD = "standard"
    REMAP = "remap"
    EXACT = "exact"


class Rule(enum.Enum):
    ZERO_SUM = "zerosum"
    MOST_NEGATIVE = "most-negative"
    MIN_ABS_DL = "min-abs"
    MIN_SIGMA = "min-sigma"


@dataclass(frozen=True)
class Strategy:
    rule: Rule = Rule.ZERO_SUM
    per_w_sorted: bool = True

    def __post_init__(self):
        if self.rule is Rule.ZERO_SUM and not self.per_w_sorted:
            raise ValueError("the zero-sum rule requires per-matrix ascending-sigma order")

    @property
    def name(self) -> str:
        return self.rule.value + ("" if self.per_w_sorted else "/unsorted")


class Candidate(NamedTuple):
    layer_id: int
    comp: int
    dl: float


class TraceStep(NamedTuple):
    layer_id: int
    comp: int
    dl: float
    heap: str      # "+" or "-" (or "" for non-heap strategies)
    cost: float
    s: float       # running sum after the step
    b: float       # budget used after the step


def storage(m: int, n: int, k: int) -> int:
    return min(m * n, k * (m + n))


def max_cost(mode: BudgetMode, m: int, n: int) -> int:
    return max(m, n) if mode is BudgetMode.REMAP else m + n


def drop_cost(mode: BudgetMode, m: int, n: int, k_prev: int, k_new: int) -> float:
    """Budget credited for lowering a layer's rank from ``k_prev`` to ``k_new``."""
    if mode is BudgetMode.REMAP:
        return max(m, n)
    if mode is BudgetMode.EXACT:
        return max(0, storage(m, n, k_prev) - storage(m, n, k_new))
    k_thr = math.ceil(m * n / (m + n))
    return m + n if k_new <= k_thr else 0


def keeps_dense(mode: BudgetMode, m: int, n: int, k: int) -> bool:
    r = min(m, n)
    if mode is BudgetMode.STANDARD:
        return k > math.ceil(m * n / (m + n))
    if mode is BudgetMode.EXACT:
        return k * (m + n) >= m * n
    return k >= r


def budget_total(layers: Sequence[WhitenedLayer], ratio: float) -> float:
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"retention ratio must lie in (0, 1], got {ratio}")
    if not layers:
        raise ValueError("no layers to select from")
    return (1.0 - ratio) * sum(wl.shape[0] * wl.shape[1] for wl in layers)


@dataclass
class RankAssignment:
    ranks: list[int]
    dense: list[bool]
    kept: list[list[int]]
    removed: list[list[int]]     # in removal order
    predicted_drift: float
    budget_total: float
    budget_used: float
    mode: BudgetMode
    ratio: float
    strategy: str
    exhausted: bool = False
    trace: list[TraceStep] = field(default_factory=list)


class SelectionState:
    """Two sign-partitioned min-heaps plus running sum and budget counters."""

    def __init__(self, layers: Sequence[WhitenedLayer], mode: BudgetMode, ratio: float):
        self.layers = list(layers)
        self.mode = mode
        self.ratio = ratio
        self.budget_total = budget_total(self.layers, ratio)
        self.budget_used = 0.0
        self.s = 0.0
        self.q_plus: list[tuple[float, int, int, float]] = []
        self.q_minus: list[tuple[float, int, int, float]] = []
        self.pointers = [1] * len(self.layers)
        self.removed: list[list[int]] = [[] for _ in self.layers]
        self.cost = [
            float(max(wl.shape)) if mode is BudgetMode.REMAP else 0.0 for wl in self.layers
        ]
        self.trace: list[TraceStep] = []
        for idx in range(len(self.layers)):
            self._push_next(idx)

    def _push_next(self, idx: int) -> None:
        wl = self.layers[idx]
        p = self.pointers[idx]
        if p > wl.r:
            return
        comp = int(wl.order[p - 1])
        dl = float(wl.delta_l[comp])
        entry = (abs(dl), idx, comp, dl)
        heapq.heappush(self.q_plus if dl >= 0 else self.q_minus, entry)

    def rank(self, idx: int) -> int:
        return self.layers[idx].r - (self.pointers[idx] - 1)

    def done(self) -> bool:
        return self.budget_used >= self.budget_total or not (self.q_plus or self.q_minus)

    def step(self) -> Candidate:
        if not (self.q_plus or self.q_minus):
            raise IndexError("both candidate heaps are empty")
        prefer_plus = self.s <= 0
        if prefer_plus:
            heap, tag = (self.q_plus, "+") if self.q_plus else (self.q_minus, "-")
        else:
            heap, tag = (self.q_minus, "-") if self.q_minus else (self.q_plus, "+")
        _, idx, comp, dl = heapq.heappop(heap)
        self.s += dl
        self.removed[idx].append(comp)
        k_prev = self.rank(idx)
        self.pointers[idx] += 1
        m, n = self.layers[idx].shape
        step_cost = drop_cost(self.mode, m, n, k_prev, self.rank(idx))
        self.cost[idx] = step_cost
        self.budget_used += step_cost
        self._push_next(idx)
        self.trace.append(TraceStep(idx, comp, dl, tag, step_cost, self.s, self.budget_used))
        return Candidate(self.layers[idx].layer_id, comp, dl)


def init_selection(layers: Sequence[WhitenedLayer], mode: BudgetMode, ratio: float) -> SelectionState:
    return SelectionState(layers, mode, ratio)


def _finish(layers, removed, mode, ratio, strategy, s, total, used, exhausted, trace) -> RankAssignment:
    ranks, dense, kept = [], [], []
    for wl, rem in zip(layers, removed):
        m, n = wl.shape
        k = wl.r - len(rem)
        gone = set(rem)
        ranks.append(k)
        dense.append(keeps_dense(mode, m, n, k))
        kept.append([i for i in range(wl.r) if i not in gone])
    if exhausted:
        msg = f"candidates exhausted before budget was met (used {used} of {total})"
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
    return RankAssignment(
        ranks=ranks,
        dense=dense,
        kept=kept,
        removed=[list(r) for r in removed],
        predicted_drift=s,
        budget_total=total,
        budget_used=used,
        mode=mode,
        ratio=ratio,
        strategy=strategy,
        exhausted=exhausted,
        trace=list(trace),
    )


def run_selection(state: SelectionState) -> RankAssignment:
    while not state.done():
        state.step()
    exhausted = state.budget_used < state.budget_total
    return _finish(
        state.layers, state.removed, state.mode, state.ratio, Strategy().name,
        state.s, state.budget_total, state.budget_used, exhausted, state.trace,
    )


def _rule_key(rule: Rule, wl: WhitenedLayer, comp: int) -> float:
    if rule is Rule.MOST_NEGATIVE:
        return float(wl.delta_l[comp])
    if rule is Rule.MIN_ABS_DL:
        return abs(float(wl.delta_l[comp]))
    return float(wl.sigma[comp])


def run_strategy(
    layers: Sequence[WhitenedLayer],
    mode: BudgetMode,
    ratio: float,
    strategy: Strategy,
) -> RankAssignment:
    """Selection under one of the ablation rules, with identical budget accounting."""
    if strategy.rule is Rule.ZERO_SUM:
        return run_selection(init_selection(layers, mode, ratio))

    total = budget_total(layers, ratio)
    removed: list[list[int]] = [[] for _ in layers]
    gone = [set() for _ in layers]
    pointers = [0] * len(layers)
    s = used = 0.0
    trace: list[TraceStep] = []

    def eligible(idx: int):
        wl = layers[idx]
        if strategy.per_w_sorted:
            if pointers[idx] < wl.r:
                yield int(wl.order[pointers[idx]])
        else:
            for comp in range(wl.r):
                if comp not in gone[idx]:
                    yield comp

    while used < total:
        best = None
        for idx, wl in enumerate(layers):
            for comp in eligible(idx):
                key = (_rule_key(strategy.rule, wl, comp), idx, comp)
                if best is None or key < best:
                    best = key
        if best is None:
            break
        _, idx, comp = best
        wl = layers[idx]
        m, n = wl.shape
        k_prev = wl.r - len(removed[idx])
        removed[idx].append(comp)
        gone[idx].add(comp)
        pointers[idx] += 1
        dl = float(wl.delta_l[comp])
        s += dl
        c = drop_cost(mode, m, n, k_prev, k_prev - 1)
        used += c
        trace.append(TraceStep(idx, comp, dl, "", c, s, used))
    exhausted = used < total
    return _finish(layers, removed, mode, ratio, strategy.name, s, total, used, exhausted, trace)


def homogeneous_baseline(layers: Sequence[WhitenedLayer], ratio: float) -> RankAssignment:
    """Per-layer rank ``floor(ratio * m n / (m + n))`` keeping the largest singular values."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"retention ratio must lie in (0, 1], got {ratio}")
    ranks, kept, removed = [], [], []
    for wl in layers:
        m, n = wl.shape
        k = min(wl.r, math.floor(ratio * m * n / (m + n)))
        ranks.append(k)
        kept.append(list(range(k)))
        removed.append(list(range(wl.r - 1, k - 1, -1)))
    drift = float(sum(float(np.sum(wl.delta_l[k:])) for wl, k in zip(layers, ranks)))
    total = (1.0 - ratio) * sum(wl.shape[0] * wl.shape[1] for wl in layers)
    used = sum(wl.shape[0] * wl.shape[1] - k * sum(wl.shape) for wl, k in zip(layers, ranks))
    return RankAssignment(
        ranks=ranks,
        dense=[False] * len(ranks),
        kept=kept,
        removed=removed,
        predicted_drift=drift,
        budget_total=total,
        budget_used=float(used),
        mode=BudgetMode.STANDARD,
        ratio=ratio,
        strategy="homogeneous",
    )


def hq_plan(target_ratio: float) -> tuple[float, int, float]:
    """Half-prune + quantize: ``(selection_ratio, bits, footprint_ratio)``.

    Selection runs at twice the target retention and every target parameter
    is stored at 8 bits instead of 16.
    """
    if not 0.0 < target_ratio <= 1.0:
        raise ValueError(f"target ratio must lie in (0, 1], got {target_ratio}")
    if target_ratio > 0.5:
        warnings.warn(
            f"HQ target {target_ratio} > 0.5: selection ratio clamps to 1", RuntimeWarning, stacklevel=2
        )
    selection = min(1.0, 2.0 * target_ratio)
    return selection, 8, selection / 2.0


def apply_assignment(
    model: ToyModel, layers: Sequence[WhitenedLayer], assignment: RankAssignment
) -> CompressedModel:
    if len(layers) != len(model.layers) or len(assignment.ranks) != len(layers):
        raise ValueError("assignment, whitened layers and model disagree on layer count")
    out = []
    for orig, wl, dense, kept in zip(model.layers, layers, assignment.dense, assignment.kept):
        if orig.shape != wl.shape:
            raise ValueError(f"layer {wl.layer_id}: model shape {orig.shape} vs whitened {wl.shape}")
        bias = np.array(orig.bias, copy=True)
        if dense:
            out.append(DenseLayer(np.array(orig.matrix(), copy=True), bias))
        else:
            wu, wv = reconstruct(wl, kept)
            out.append(FactoredLayer(wu, wv, bias))
    return CompressedModel(model.spec, out)


def stored_params(assignment: RankAssignment, layers: Sequence[WhitenedLayer]) -> int:
    """Parameters held by the compressed model (dense mn or factored k(m+n))."""
    total = 0
    for wl, k, dense in zip(layers, assignment.ranks, assignment.dense):
        m, n = wl.shape
        total += m * n if dense else k * (m + n)
    return total

