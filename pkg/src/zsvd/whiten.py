"""Activation whitening, whitened SVD and per-component loss sensitivities."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import ShapeError
from .linalg import Svd


@dataclass(frozen=True)
class RidgeConfig:
    rel: float = 1e-6     # multiplies trace(C) / n
    floor: float = 1e-10

    def value(self, c: np.ndarray) -> float:
        n = c.shape[0]
        return self.rel * float(np.trace(c)) / n + self.floor


@dataclass
class WhitenedLayer:
    layer_id: int
    shape: tuple[int, int]
    s: np.ndarray
    lambda_used: float
    svd: Svd
    whitened_grad: np.ndarray
    g_sigma: np.ndarray
    delta_l: np.ndarray
    order: np.ndarray     # 0-based indices sorting sigma ascending
    pointer: int = 1      # 1-based position of the next candidate in ``order``

    @property
    def sigma(self) -> np.ndarray:
        return self.svd.sigma

    @property
    def r(self) -> int:
        return self.svd.sigma.shape[0]

    @property
    def k_thr(self) -> int:
        m, n = self.shape
        return math.ceil(m * n / (m + n))


def second_moment(x) -> np.ndarray:
    x = linalg.as_mat(x, "activations")
    if x.size == 0:
        raise ShapeError("activations must be non-empty")
    c = x @ x.T
    return 0.5 * (c + c.T)


def whiten_layer(w, x, ridge: RidgeConfig = RidgeConfig()):
    """Return ``(s, a, svd, lam)`` for ``a = w @ s`` with ``s s^T = x x^T + lam I``."""
    w = linalg.as_mat(w, "weight")
    x = linalg.as_mat(x, "activations")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"weight is {w.shape} but activations have {x.shape[0]} rows")
    c = second_moment(x)
    lam = ridge.value(c)
    s = linalg.cholesky_ridge(c, lam)
    a = w @ s
    return s, a, linalg.svd(a), lam


def ascending_order(sigma: np.ndarray) -> np.ndarray:
    # stable sort keeps the lower original index first among equal values
    return np.argsort(sigma, kind="stable")


def sensitivities(layer_id: int, w, s: np.ndarray, lam: float, svd: Svd, g_w) -> WhitenedLayer:
    """Attach whitened gradient, ``g_sigma`` and predicted loss changes."""
    g_w = linalg.as_mat(g_w, "gradient")
    if g_w.shape != np.shape(w):
        raise ShapeError(f"gradient shape {g_w.shape} differs from weight shape {np.shape(w)}")
    h = linalg.solve_right_inverse_transpose(g_w, s)
    # g_sigma_i = u_i^T H v_i
    g_sigma = np.einsum("ir,ij,rj->r", svd.u, h, svd.vt)
    delta_l = -svd.sigma * g_sigma
    return WhitenedLayer(
        layer_id=layer_id,
        shape=tuple(np.shape(w)),
        s=s,
        lambda_used=lam,
        svd=svd,
        whitened_grad=h,
        g_sigma=g_sigma,
        delta_l=delta_l,
        order=ascending_order(svd.sigma),
    )


def build_layer(layer_id: int, w, x, g_w, ridge: RidgeConfig = RidgeConfig()) -> WhitenedLayer:
    s, _, svd, lam = whiten_layer(w, x, ridge)
    return sensitivities(layer_id, w, s, lam, svd, g_w)


def factors_from_svd(svd: Svd, s: np.ndarray, kept) -> tuple[np.ndarray, np.ndarray]:
    idx = np.array(sorted(set(int(i) for i in kept)), dtype=np.int64)
    m, n = svd.u.shape[0], svd.vt.shape[1]
    if idx.size == 0:
        return np.zeros((m, 0)), np.zeros((0, n))
    if idx[0] < 0 or idx[-1] >= svd.sigma.shape[0]:
        raise IndexError(f"component index out of range 0..{svd.sigma.shape[0] - 1}")
    # svd.sigma is descending, so increasing index order is descending sigma
    root = np.sqrt(svd.sigma[idx])
    wu = svd.u[:, idx] * root
    wv = linalg.solve_right_inverse(root[:, None] * svd.vt[idx, :], s)
    return wu, wv


def reconstruct(wl: WhitenedLayer, kept) -> tuple[np.ndarray, np.ndarray]:
    """Factors ``wu = U_K sqrt(S_K)``, ``wv = sqrt(S_K) V_K^T s^{-1}`` over components ``kept``."""
    return factors_from_svd(wl.svd, wl.s, kept)


def retruncate(w_new, wl: WhitenedLayer, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Best rank-``k`` factors of ``w_new`` in the layer's original whitened coordinates."""
    a = linalg.as_mat(w_new) @ wl.s
    return factors_from_svd(linalg.svd(a), wl.s, range(k))
