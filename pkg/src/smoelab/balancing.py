"""Load accounting and balancing: Switch-style auxiliary loss, router
z-loss, sequence-wise auxiliary loss, and loss-free bias updates."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .moe_layer import RoutingDecision
from .numerics import logsumexp, softmax


@dataclass
class LoadStats:
    fractions: np.ndarray  # (N,), float64, sums to 1
    target: float
    batch_assignments: int

    @property
    def n_experts(self):
        return self.fractions.shape[0]


@dataclass
class BalanceGrads:
    """Loss value and its gradient on the raw router logits.

    ``dlogits[t, j]`` is the scalar coefficient of token ``t``'s
    contribution to row ``j``: that contribution is ``dlogits[t, j] * x_t``.
    """

    loss: float
    dlogits: np.ndarray  # (T, N)

    def row_grads(self, x) -> np.ndarray:
        """Accumulated gradient on each router row, shape (N, d)."""
        return self.dlogits.T @ np.asarray(x, dtype=self.dlogits.dtype)

    def token_row_grads(self, x, t: int) -> np.ndarray:
        """Single-token contribution to every router row, shape (N, d)."""
        x = np.asarray(x)
        return np.outer(self.dlogits[t], x[t])


def _selected(decisions):
    if isinstance(decisions, RoutingDecision):
        return decisions.selected
    decisions = list(decisions)
    if not decisions:
        raise ValueError("load fractions of an empty batch")
    return np.concatenate([np.atleast_2d(d.selected) for d in decisions], axis=0)


def load_fractions(decisions, n: int, k: int) -> LoadStats:
    """f_i = (# top-k assignments to expert i) / (k |B|); target 1/N."""
    sel = np.asarray(_selected(decisions) if not isinstance(decisions, np.ndarray) else decisions)
    if sel.size == 0:
        raise ValueError("load fractions of an empty batch")
    if sel.ndim != 2 or sel.shape[1] != k:
        raise ValueError(f"expected {k} selections per token, got shape {sel.shape}")
    counts = np.bincount(sel.ravel(), minlength=n).astype(np.float64)
    if counts.shape[0] != n:
        raise IndexError(f"expert index beyond {n}")
    total = k * sel.shape[0]
    return LoadStats(counts / total, 1.0 / n, total)


def aux_balance_loss(stats: LoadStats, logits) -> BalanceGrads:
    """L = N sum_i f_i P_i with P_i the batch mean of the full softmax.

    f is held constant; the gradient reaches every router logit through P.
    """
    z = np.asarray(logits)
    t, n = z.shape
    f = stats.fractions
    probs = softmax(z.astype(np.float64), axis=1)
    big_p = probs.mean(axis=0)
    loss = float(n * f @ big_p)
    # dL/dz_tj = (N/T) P_tj (f_j - sum_i f_i P_ti)
    dz = (n / t) * probs * (f[None, :] - (probs @ f)[:, None])
    return BalanceGrads(loss, dz.astype(z.dtype))


def router_z_loss(logits) -> BalanceGrads:
    """ST-MoE z-loss: mean over tokens of logsumexp(z)^2."""
    z = np.asarray(logits)
    t = z.shape[0]
    z64 = z.astype(np.float64)
    lse = logsumexp(z64, axis=1)
    loss = float(np.mean(lse**2))
    dz = (2.0 / t) * lse[:, None] * softmax(z64, axis=1)
    return BalanceGrads(loss, dz.astype(z.dtype))


def seq_aux_loss(selected, logits, seq_len: int, n: int, k: int) -> BalanceGrads:
    """Per-sequence auxiliary balance loss, averaged over sequences.

    Tokens are laid out sequence-major: rows ``[s*seq_len, (s+1)*seq_len)``
    form sequence ``s``. Empty sequences are skipped with a warning.
    """
    z = np.asarray(logits)
    sel = np.asarray(selected)
    t = z.shape[0]
    if seq_len <= 0:
        raise ValueError("sequence length must be positive")
    dz = np.zeros_like(z)
    losses = []
    skipped = 0
    for start in range(0, max(t, 1), seq_len):
        stop = min(start + seq_len, t)
        if stop <= start:
            skipped += 1
            continue
        stats = load_fractions(sel[start:stop], n, k)
        g = aux_balance_loss(stats, z[start:stop])
        losses.append(g.loss)
        dz[start:stop] = g.dlogits
    if skipped:
        warnings.warn(f"seq_aux_loss skipped {skipped} empty sequence(s)", RuntimeWarning)
    if not losses:
        return BalanceGrads(0.0, dz)
    m = len(losses)
    return BalanceGrads(float(np.mean(losses)), dz / dz.dtype.type(m))


def bias_update(bias, stats: LoadStats, gamma: float) -> np.ndarray:
    """b_i <- b_i + gamma * sign(tau - f_i), with sign(0) = 0."""
    if gamma <= 0:
        raise ValueError("bias update rate must be positive")
    bias = np.asarray(bias)
    step = gamma * np.sign(stats.target - stats.fractions)
    return (bias.astype(np.float64) + step).astype(bias.dtype)
