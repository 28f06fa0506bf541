"""Hot loops behind routing and the token mixer.

The compiled extension is used when it imported cleanly; otherwise the numpy
fallback serves the same functions. Set ``SMOELAB_KERNELS=python`` to force
the fallback.
"""
import os

import numpy as np

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("SMOELAB_KERNELS", "").lower() != "python":
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _fallback


def _float_array(a):
    a = np.asarray(a)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float32)
    return np.ascontiguousarray(a)


def topk_indices(scores, k):
    """Indices of the ``k`` largest entries per row, largest first.

    Ties go to the lower index.
    """
    return _impl.topk_indices(_float_array(scores), int(k))


def group_by_expert(selected, n):
    """Counting sort of (token, slot) pairs by expert.

    Returns ``(tokens, slots, offsets)``: pairs for expert ``e`` live in
    ``tokens[offsets[e]:offsets[e + 1]]`` with tokens ascending.
    """
    selected = np.ascontiguousarray(selected, dtype=np.int64)
    return _impl.group_by_expert(selected, int(n))


def ema_scan(e, decay):
    """Causal exponential moving average along axis 1 of a (B, S, d) array."""
    return _impl.ema_scan(_float_array(e), float(decay))


def ema_scan_backward(g, decay):
    """Adjoint of :func:`ema_scan`."""
    return _impl.ema_scan_backward(_float_array(g), float(decay))


def use_backend(name):
    """Switch kernels at runtime (``"python"`` or ``"cython"``); for benchmarks and tests."""
    global _impl, BACKEND
    if name == "python":
        _impl, BACKEND = _fallback, "python"
    elif name == "cython":
        from . import _core

        _impl, BACKEND = _core, "cython"
    else:
        raise ValueError(f"unknown kernel backend {name!r}")


def swiglu_gate(pre):
    """Fused ``(sigmoid(pre), silu(pre))`` for a 2-D array of gate pre-activations.

    Always the numpy version: a scalar libm loop is slower than numpy's
    vectorised exp, and vectorising it would need -ffast-math.
    """
    pre = _float_array(pre)
    if pre.ndim != 2:
        raise ValueError(f"gate pre-activations must be 2-D, got shape {pre.shape}")
    return _fallback.swiglu_gate(pre)
