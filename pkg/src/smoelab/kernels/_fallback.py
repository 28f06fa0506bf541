"""Pure numpy implementations of the routing and scan kernels."""
import numpy as np


def topk_indices(scores, k):
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise ValueError(f"scores must be 2-D, got shape {scores.shape}")
    n = scores.shape[1]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    # stable sort on negated scores keeps the lowest index first among ties
    return np.argsort(-scores, axis=1, kind="stable")[:, :k].astype(np.int64)


def group_by_expert(selected, n):
    selected = np.asarray(selected, dtype=np.int64)
    t, k = selected.shape
    flat = selected.ravel()
    order = np.argsort(flat, kind="stable")
    tokens = order // k
    slots = order % k
    counts = np.bincount(flat, minlength=n)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=offsets[1:])
    return tokens.astype(np.int64), slots.astype(np.int64), offsets


def ema_scan(e, decay):
    e = np.asarray(e)
    a = np.asarray(decay, dtype=e.dtype)
    b = np.asarray(1.0 - decay, dtype=e.dtype)
    out = np.empty_like(e)
    prev = np.zeros(e.shape[:1] + e.shape[2:], dtype=e.dtype)
    for t in range(e.shape[1]):
        prev = a * prev + b * e[:, t]
        out[:, t] = prev
    return out


def ema_scan_backward(g, decay):
    g = np.asarray(g)
    a = np.asarray(decay, dtype=g.dtype)
    b = np.asarray(1.0 - decay, dtype=g.dtype)
    out = np.empty_like(g)
    acc = np.zeros(g.shape[:1] + g.shape[2:], dtype=g.dtype)
    for t in range(g.shape[1] - 1, -1, -1):
        acc = g[:, t] + a * acc
        out[:, t] = b * acc
    return out


def swiglu_gate(pre):
    pre = np.asarray(pre)
    e = np.exp(-np.abs(pre))
    one = pre.dtype.type(1)
    sig = np.where(pre >= 0, one / (one + e), e / (one + e))
    return sig, pre * sig
