"""Parameter-free online K-Means router.

Each expert keeps an EMA centroid of the hidden states routed to it. Tokens
go to the ``k`` experts with the largest ``cos(c_i, x) + b_i``. Nothing here
touches gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .balancing import LoadStats, bias_update
from .moe_layer import RoutingDecision, WeightMode, masked_softmax, topk_select
from .numerics import COMPUTE_DTYPE, COSINE_EPS, Rng, ShapeError

DEFAULT_ALPHA = 0.99
DEFAULT_GAMMA = 1e-3


@dataclass
class CentroidState:
    centroids: np.ndarray  # (N, d)
    bias: np.ndarray  # (N,)
    alpha: float = DEFAULT_ALPHA
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"decay alpha={self.alpha} outside [0, 1)")
        if self.gamma <= 0:
            raise ValueError("bias rate gamma must be positive")
        if self.bias.shape != (self.centroids.shape[0],):
            raise ShapeError(f"bias {self.bias.shape} does not match centroids {self.centroids.shape}")

    @property
    def n_experts(self):
        return self.centroids.shape[0]

    def route(self, x, k) -> RoutingDecision:
        cos = _cosines(self, x)
        scores = cos + self.bias.astype(cos.dtype)
        sel = topk_select(scores, k)
        return RoutingDecision(cos, scores, sel, masked_softmax(cos, sel), WeightMode.SOFTMAX_SCORES)


def _cosines(state: CentroidState, x) -> np.ndarray:
    x = np.asarray(x)
    single = x.ndim == 1
    xt = x[None, :] if single else x
    if xt.shape[1] != state.centroids.shape[1]:
        raise ShapeError(f"token dim {xt.shape[1]} != centroid dim {state.centroids.shape[1]}")
    c = state.centroids.astype(xt.dtype)
    cn = np.linalg.norm(c, axis=1)
    xn = np.linalg.norm(xt, axis=1)
    cos = (xt @ c.T) / np.maximum(xn[:, None] * cn[None, :], COSINE_EPS).astype(xt.dtype)
    return cos[0] if single else cos


def centroid_scores(state: CentroidState, x) -> np.ndarray:
    """s_i(x) = cos(c_i, x) + b_i. A zero ``x`` scores exactly ``b``."""
    cos = _cosines(state, x)
    return cos + state.bias.astype(cos.dtype)


def centroid_route(state: CentroidState, x, k: int) -> RoutingDecision:
    return state.route(x, k)


def centroid_update(state: CentroidState, x, selected=None) -> CentroidState:
    """EMA step ``c_i <- a c_i + (1 - a) mean(T_i)`` on this micro-batch.

    ``x`` is either the (T, d) token batch together with the (T, K)
    ``selected`` array, or a list of per-expert token arrays. Experts that
    received no tokens are left untouched.
    """
    c = state.centroids.copy()
    a = state.alpha
    for i, xs in enumerate(_per_expert(x, selected, state.n_experts)):
        if xs is None or len(xs) == 0:
            continue
        mean = np.asarray(xs, dtype=np.float64).mean(axis=0)
        c[i] = (a * c[i].astype(np.float64) + (1.0 - a) * mean).astype(c.dtype)
    return CentroidState(c, state.bias.copy(), state.alpha, state.gamma)


def _per_expert(x, selected, n):
    if selected is None:
        groups = list(x)
        if len(groups) != n:
            raise ShapeError(f"{len(groups)} token groups for {n} experts")
        return groups
    x = np.asarray(x)
    sel = np.asarray(selected)
    return [x[np.any(sel == i, axis=1)] for i in range(n)]


def centroid_bias_update(state: CentroidState, stats: LoadStats) -> CentroidState:
    return CentroidState(state.centroids.copy(), bias_update(state.bias, stats, state.gamma), state.alpha, state.gamma)


def centroid_init(rng: Rng, n: int, d: int, alpha=DEFAULT_ALPHA, gamma=DEFAULT_GAMMA, dtype=COMPUTE_DTYPE) -> CentroidState:
    if n < 1 or d < 1:
        raise ValueError("need at least one centroid of dimension >= 1")
    c = rng.normal((n, d), 1.0, np.float64)
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    return CentroidState(c.astype(dtype), np.zeros(n, dtype=dtype), alpha, gamma)
