"""Brute-force validators.

Each check recomputes its quantity by a route that does not go through the
code it validates: direct matrix products, numpy's own factorizations, finite
differences, or a linear-scan replay of the selector.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import toynet
from .linalg import Svd
from .model import DenseLayer, ModelSpec, ToyModel
from .select import BudgetMode, init_selection, run_selection
from .toynet import CalibSet
from .whiten import RidgeConfig, WhitenedLayer, build_layer, reconstruct

RANK_RTOL = 1e-8
FD_LADDER = (1e-3, 1e-4, 1e-5)


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: float
    tolerance: float
    context: dict = field(default_factory=dict)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: measured={self.measured:.3e} tol={self.tolerance:.1e} {self.context}"


def _numerical_rank(a: np.ndarray) -> int:
    sig = np.linalg.svd(a, compute_uv=False)
    if sig.size == 0 or sig[0] == 0:
        return 0
    return int(np.sum(sig > RANK_RTOL * sig[0]))


# -- whitened truncation energy ---------------------------------------------


def check_truncation_energy(w, x, k: int, ridge_floor: float = 1e-10, tol: float = 1e-6) -> CheckResult:
    """Activation error of the whitened rank-k truncation equals the dropped spectral energy."""
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    g0 = np.zeros_like(w)
    wl = build_layer(0, w, x, g0, RidgeConfig(rel=0.0, floor=ridge_floor))
    wu, wv = reconstruct(wl, range(k))
    lhs = float(np.sum((w @ x - wu @ (wv @ x)) ** 2))
    # independent right-hand side: numpy Cholesky + singular values
    c = x @ x.T + ridge_floor * np.eye(x.shape[0])
    sig = np.linalg.svd(w @ np.linalg.cholesky(c), compute_uv=False)
    rhs = float(np.sum(sig[k:] ** 2))
    total = float(np.sum(sig**2))
    gap = abs(lhs - rhs) / total if total > 0 else abs(lhs - rhs)
    return CheckResult(
        "truncation_energy", gap <= tol, gap, tol,
        {"shape": list(w.shape), "T": x.shape[1], "k": k, "ridge_floor": ridge_floor},
    )


# -- Eckart-Young ------------------------------------------------------------


def check_eckart_young(a, k: int, trials: int = 200, seed: int = 0) -> CheckResult:
    """No sampled rank-k matrix beats the truncated SVD in Frobenius distance."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    a = np.asarray(a, dtype=np.float64)
    m, n = a.shape
    rng = np.random.default_rng(seed)
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    a_k = (u[:, :k] * s[:k]) @ vt[:k]
    best = np.linalg.norm(a - a_k)
    scale = np.linalg.norm(a) / math.sqrt(max(k, 1))
    worst_margin = math.inf
    for t in range(trials):
        if t % 2 == 0:
            b = rng.standard_normal((m, k)) @ rng.standard_normal((k, n))
            b *= scale / max(np.linalg.norm(b), 1e-300)
        else:
            eps = 10.0 ** rng.uniform(-6, -1)
            uk = u[:, :k] + eps * rng.standard_normal((m, k))
            vk = vt[:k] + eps * rng.standard_normal((k, n))
            b = (uk * s[:k]) @ vk
        worst_margin = min(worst_margin, np.linalg.norm(a - b) - best)
    tol = 1e-12 * max(1.0, np.linalg.norm(a))
    return CheckResult(
        "eckart_young", bool(worst_margin >= -tol), float(worst_margin), tol,
        {"shape": [m, n], "k": k, "trials": trials, "seed": seed},
    )


# -- sensitivities by finite differences -------------------------------------


def fd_sensitivity(
    loss_of: Callable[[np.ndarray], float],
    w: np.ndarray,
    direction: np.ndarray,
    predicted: float,
    eps_ladder: Sequence[float] = FD_LADDER,
    rtol: float = 1e-3,
    name: str = "deltal_fd",
    context: dict | None = None,
) -> CheckResult:
    """Compare ``predicted`` with the loss slope along ``direction`` in weight space.

    Passes when the central-difference slope at 1e-4 is within ``rtol`` of the
    prediction and the one-sided first-order remainder shrinks at least 3x per
    decade of step size (down to the round-off floor).
    """
    base = loss_of(w)
    slopes, remainders = [], []
    for eps in eps_ladder:
        up = loss_of(w + eps * direction)
        down = loss_of(w - eps * direction)
        slopes.append((up - down) / (2 * eps))
        remainders.append(abs(up - base - eps * predicted))
    ref = list(eps_ladder).index(1e-4) if 1e-4 in eps_ladder else len(eps_ladder) // 2
    denom = abs(predicted) if predicted != 0 else 1.0
    slope_err = abs(slopes[ref] - predicted) / denom
    if predicted == 0:
        slope_ok = abs(slopes[ref]) <= 1e-8
    else:
        slope_ok = slope_err <= rtol
    floor = 64 * np.finfo(float).eps * max(1.0, abs(base))
    converging = True
    for big, small in zip(remainders, remainders[1:]):
        if small > floor and big < 3 * small:
            converging = False
    ctx = dict(context or {})
    ctx.update(slopes=[float(s) for s in slopes], predicted=float(predicted))
    return CheckResult(name, bool(slope_ok and converging), float(slope_err), rtol, ctx)


def _replace_layer(model: ToyModel, layer: int, w: np.ndarray) -> ToyModel:
    layers = list(model.layers)
    layers[layer] = DenseLayer(w, model.layers[layer].bias)
    return ToyModel(model.spec, layers)


def check_deltal_fd(
    model: ToyModel,
    calib: CalibSet,
    layer: int,
    i: int,
    eps_ladder: Sequence[float] = FD_LADDER,
    ridge: RidgeConfig = RidgeConfig(),
    g_override: np.ndarray | None = None,
) -> CheckResult:
    """Finite-difference check of ``g_sigma[i]`` for one layer of a toy model.

    ``A`` is perturbed by ``eps u_i v_i^T`` and mapped back to weights through
    ``S^{-1}``. With ``g_override`` the sensitivities are computed from an
    injected gradient (the true loss slope is still measured).
    """
    caps = toynet.backward(model, calib)
    w = model.layers[layer].matrix()
    g = caps[layer].g if g_override is None else g_override
    wl = build_layer(layer, w, caps[layer].x, g, ridge)
    if not 0 <= i < wl.r:
        raise IndexError(f"component {i} out of range for rank {wl.r}")
    u_i = wl.svd.u[:, i]
    v_i = wl.svd.vt[i, :]
    # direction u v^T S^{-1}, via numpy's general solver
    direction = np.outer(u_i, np.linalg.solve(wl.s.T, v_i))

    def loss_of(w_new):
        return toynet.evaluate(_replace_layer(model, layer, w_new), calib)[0]

    return fd_sensitivity(
        loss_of, w, direction, float(wl.g_sigma[i]), eps_ladder,
        context={"layer": layer, "component": i, "g_sigma": float(wl.g_sigma[i])},
    )


# -- rank of a sum -----------------------------------------------------------


def check_rank_bound(seed_a: int, seed_b: int, a_rank: int, b_rank: int, shape=(10, 10)) -> CheckResult:
    m, n = shape
    ra = np.random.default_rng(seed_a)
    rb = np.random.default_rng(seed_b)
    a = ra.standard_normal((m, a_rank)) @ ra.standard_normal((a_rank, n))
    b = rb.standard_normal((m, b_rank)) @ rb.standard_normal((b_rank, n))
    r = _numerical_rank(a + b)
    bound = a_rank + b_rank
    return CheckResult(
        "rank_bound", r <= bound, float(r), float(bound),
        {"seeds": [seed_a, seed_b], "ranks": [a_rank, b_rank], "shape": [m, n]},
    )


# -- selector replay ---------------------------------------------------------


def synthetic_layer(layer_id: int, shape, sigma, delta_l) -> WhitenedLayer:
    """Selector-only stand-in: a spectrum and predicted changes, no real factors."""
    m, n = shape
    sigma = np.asarray(sigma, dtype=np.float64)
    dl = np.asarray(delta_l, dtype=np.float64)
    r = min(m, n)
    if sigma.shape != (r,) or dl.shape != (r,):
        raise ValueError(f"need {r} singular values and predicted changes")
    svd = Svd(np.zeros((m, r)), sigma, np.zeros((r, n)))
    return WhitenedLayer(
        layer_id=layer_id, shape=(m, n), s=np.eye(n), lambda_used=0.0, svd=svd,
        whitened_grad=np.zeros((m, n)), g_sigma=-dl / np.where(sigma > 0, sigma, 1.0),
        delta_l=dl, order=np.argsort(sigma, kind="stable"),
    )


def fuzz_layers(fuzz_seed: int) -> tuple[list[WhitenedLayer], BudgetMode, float]:
    """Random multi-layer selector instance (2-8 layers, dims <= 24, signed predicted changes)."""
    rng = np.random.default_rng([fuzz_seed, 0xF022])
    layers = []
    for idx in range(int(rng.integers(2, 9))):
        m, n = (int(d) for d in rng.integers(1, 25, size=2))
        r = min(m, n)
        sigma = np.sort(rng.exponential(1.0, size=r))[::-1].copy()
        if r > 2 and rng.random() < 0.3:
            sigma[1] = sigma[2]
        dl = rng.standard_normal(r) * 10.0 ** rng.uniform(-3, 1)
        if rng.random() < 0.3:
            dl[rng.integers(0, r)] = 0.0
        if r > 1 and rng.random() < 0.3:
            dl[0] = -dl[1]
        layers.append(synthetic_layer(idx, (m, n), sigma, dl))
    mode = [BudgetMode.STANDARD, BudgetMode.REMAP, BudgetMode.EXACT][int(rng.integers(0, 3))]
    ratio = float(rng.choice([1.0, rng.uniform(0.05, 1.0)], p=[0.1, 0.9]))
    return layers, mode, ratio


def linear_scan_selection(layers: Sequence[WhitenedLayer], mode: BudgetMode, ratio: float) -> list[tuple]:
    """Straight-line replay of zero-sum selection: no heaps, a full scan per step.

    Returns ``(layer, comp, dl, s, b)`` for each removal.
    """
    shapes = [wl.shape for wl in layers]
    budget = (1.0 - ratio) * sum(m * n for m, n in shapes)
    nxt = [0] * len(layers)
    s = b = 0.0
    out = []
    while b < budget:
        pos, neg = [], []
        for idx, wl in enumerate(layers):
            if nxt[idx] < wl.r:
                comp = int(wl.order[nxt[idx]])
                dl = float(wl.delta_l[comp])
                (pos if dl >= 0 else neg).append((abs(dl), idx, comp, dl))
        if not pos and not neg:
            break
        pool = (pos or neg) if s <= 0 else (neg or pos)
        best = pool[0]
        for cand in pool[1:]:
            if cand[:3] < best[:3]:
                best = cand
        _, idx, comp, dl = best
        m, n = shapes[idx]
        r = min(m, n)
        k_before = r - nxt[idx]
        nxt[idx] += 1
        k_after = r - nxt[idx]
        if mode is BudgetMode.REMAP:
            cost = max(m, n)
        elif mode is BudgetMode.EXACT:
            cost = max(0, min(m * n, k_before * (m + n)) - min(m * n, k_after * (m + n)))
        else:
            cost = (m + n) if k_after <= -(-m * n // (m + n)) else 0
        s += dl
        b += cost
        out.append((idx, comp, dl, s, b))
    return out


def check_selector_trace(fuzz_seed: int) -> CheckResult:
    layers, mode, ratio = fuzz_layers(fuzz_seed)
    got = run_selection(init_selection(layers, mode, ratio))
    impl = [(t.layer_id, t.comp, t.dl, t.s, t.b) for t in got.trace]
    ref = linear_scan_selection(layers, mode, ratio)
    mismatches = sum(1 for a, b in zip(impl, ref) if a != b) + abs(len(impl) - len(ref))
    return CheckResult(
        "selector_trace", mismatches == 0, float(mismatches), 0.0,
        {"seed": fuzz_seed, "layers": len(layers), "mode": mode.value, "ratio": ratio, "steps": len(ref)},
    )


# -- suite -------------------------------------------------------------------

SUITE = ("truncation_energy", "eckart_young", "deltal_fd", "rank_bound", "selector_trace")


def run_suite(
    seed: int = 0,
    checks: Sequence[str] = SUITE,
    ridge_floor: float = 1e-10,
    spec_dims: Sequence[int] = (32, 64, 48, 10),
    tokens: int = 512,
) -> list[CheckResult]:
    if not checks:
        raise ValueError("empty check selection")
    unknown = set(checks) - set(SUITE)
    if unknown:
        raise ValueError(f"unknown checks: {sorted(unknown)}")
    rng = np.random.default_rng([seed, 0x0AC1E])
    results: list[CheckResult] = []
    if "truncation_energy" in checks:
        for _ in range(10):
            m, n = (int(d) for d in rng.integers(2, 17, size=2))
            w = rng.standard_normal((m, n))
            x = rng.standard_normal((n, 4 * n))
            for k in range(min(m, n) + 1):
                results.append(check_truncation_energy(w, x, k, ridge_floor))
    if "eckart_young" in checks:
        for j in range(10):
            m, n = (int(d) for d in rng.integers(2, 13, size=2))
            k = int(rng.integers(1, min(m, n) + 1))
            results.append(check_eckart_young(rng.standard_normal((m, n)), k, 200, seed + j))
    if "deltal_fd" in checks:
        spec = ModelSpec(tuple(spec_dims), "gelu_tanh", seed)
        model = toynet.build_model(spec)
        calib = toynet.gen_calibration(spec, seed, tokens, input_seed=seed + 1)
        for _ in range(10):
            layer = int(rng.integers(0, spec.n_layers))
            m, n = spec.shapes()[layer]
            results.append(check_deltal_fd(model, calib, layer, int(rng.integers(0, min(m, n)))))
    if "rank_bound" in checks:
        for j in range(20):
            a_rank, b_rank = (int(d) for d in rng.integers(0, 6, size=2))
            results.append(check_rank_bound(seed + 2 * j, seed + 2 * j + 1, a_rank, b_rank))
    if "selector_trace" in checks:
        for j in range(100):
            results.append(check_selector_trace(seed * 1000 + j))
    return results
