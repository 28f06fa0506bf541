"""Dense linear algebra, activations, similarity, statistics and RNG helpers.

Matrices and vectors are plain numpy arrays. Model computation runs in
float32; anything that accumulates a metric, a loss or a finite difference
does so in float64.
"""
from __future__ import annotations

import hashlib
from typing import Callable, NamedTuple

import numpy as np
from scipy.stats import rankdata

COMPUTE_DTYPE = np.float32
COSINE_EPS = 1e-8


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


def as_matrix(m, dtype=None) -> np.ndarray:
    m = np.asarray(m, dtype=dtype)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    return m


def matvec(m, v) -> np.ndarray:
    m = as_matrix(m)
    v = np.asarray(v)
    if v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ShapeError(f"cannot multiply {m.shape} matrix by {v.shape} vector")
    return m @ v


def sigmoid(x):
    x = np.asarray(x)
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def silu(x):
    """x * sigmoid(x), elementwise. Scalars in, scalars out."""
    if np.isscalar(x):
        return float(silu(np.array([x], dtype=np.float64))[0])
    x = np.asarray(x)
    return x * sigmoid(x)


def silu_deriv(x):
    if np.isscalar(x):
        return float(silu_deriv(np.array([x], dtype=np.float64))[0])
    x = np.asarray(x)
    s = sigmoid(x)
    return s * (1 + x * (1 - s))


def softmax(z, axis=-1):
    z = np.asarray(z)
    if not np.issubdtype(z.dtype, np.floating):
        z = z.astype(np.float64)
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(z, axis=-1):
    z = np.asarray(z)
    m = z.max(axis=axis, keepdims=True)
    out = m + np.log(np.exp(z - m).sum(axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def cosine(a, b) -> float:
    """Cosine similarity; two zero vectors give 0."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cosine of {a.shape} and {b.shape}")
    denom = max(np.linalg.norm(a) * np.linalg.norm(b), COSINE_EPS)
    return float(np.clip(a @ b / denom, -1.0, 1.0))


def cosine_rows(a, b) -> np.ndarray:
    """Row-wise cosine between two (n, d) arrays, same edge convention as :func:`cosine`."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1), COSINE_EPS)
    return np.clip(np.sum(a * b, axis=-1) / denom, -1.0, 1.0)


class SpearmanResult(NamedTuple):
    rho: float
    p_value: float
    degenerate: bool = False


def spearman_rho(xs, ys, permutations: int = 10_000, seed: int = 0) -> SpearmanResult:
    """Spearman rank correlation with a two-sided permutation p-value.

    Ties receive average ranks. Constant input on either side returns a
    degenerate result with NaN statistics.
    """
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ShapeError(f"spearman inputs must be equal-length vectors, got {xs.shape}, {ys.shape}")
    if xs.size < 3:
        raise ValueError("spearman_rho needs at least 3 pairs")
    rx = rankdata(xs)
    ry = rankdata(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    nx, ny = np.linalg.norm(rx), np.linalg.norm(ry)
    if nx == 0 or ny == 0:
        return SpearmanResult(float("nan"), float("nan"), True)
    rx /= nx
    ry /= ny
    rho = float(np.clip(rx @ ry, -1.0, 1.0))
    if permutations <= 0:
        return SpearmanResult(rho, float("nan"))
    gen = Rng(seed).child("spearman").generator
    hits = 0
    chunk = max(1, min(permutations, 4_000_000 // xs.size))
    done = 0
    # tolerance so that permutations reproducing the observed statistic count as hits
    thresh = abs(rho) - 1e-12
    while done < permutations:
        m = min(chunk, permutations - done)
        perm = gen.permuted(np.broadcast_to(ry, (m, ry.size)), axis=1)
        hits += int(np.count_nonzero(np.abs(perm @ rx) >= thresh))
        done += m
    return SpearmanResult(rho, (hits + 1) / (permutations + 1))


class FiniteDiffError(ArithmeticError):
    """The objective returned a non-finite value."""


def finite_diff_grad(
    f: Callable[[], float | tuple[float, object]],
    params: dict[str, np.ndarray],
    h: float = 1e-3,
    keys=None,
) -> dict[str, np.ndarray]:
    """Central-difference gradient of ``f`` w.r.t. arrays in ``params``.

    ``f`` takes no arguments and reads the arrays, which are perturbed in
    place and restored. The realised step ``(x + h) - (x - h)`` is measured
    in float64, so low-precision parameters do not bias the quotient.

    ``f`` may return ``(value, signature)``; coordinates whose perturbed
    signatures differ from the unperturbed one are set to NaN. The trainer
    uses this to mask coordinates that flip a top-k selection.
    """
    if h <= 0:
        raise ValueError("finite difference step must be positive")

    def call():
        out = f()
        if isinstance(out, tuple):
            val, sig = out
        else:
            val, sig = out, None
        val = float(val)
        if not np.isfinite(val):
            raise FiniteDiffError(f"objective is not finite: {val}")
        return val, sig

    _, base_sig = call()
    grads = {}
    for name in keys if keys is not None else params:
        arr = params[name]
        g = np.zeros(arr.shape, dtype=np.float64)
        flat = arr.reshape(-1)
        if not np.shares_memory(flat, arr):
            raise ValueError(f"parameter {name!r} must be contiguous")
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + arr.dtype.type(h)
            up = float(flat[i])
            fp, sp = call()
            flat[i] = orig - arr.dtype.type(h)
            down = float(flat[i])
            fm, sm = call()
            flat[i] = orig
            if base_sig is not None and (sp != base_sig or sm != base_sig):
                gflat[i] = np.nan
            else:
                gflat[i] = (fp - fm) / (up - down)
        grads[name] = g
    return grads


def _derive_key(seed: int, labels: tuple) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for lab in labels:
        h.update(b"\x1f")
        h.update(str(lab).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class Rng:
    """Counter-based (Philox) generator with named sub-streams.

    ``Rng(seed).child("layer", 0, "init")`` always yields the same stream,
    independent of how much any other stream has been consumed.
    """

    def __init__(self, seed: int, _labels: tuple = ()):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.labels = _labels
        self.generator = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, _labels)))

    def child(self, *labels) -> "Rng":
        return Rng(self.seed, self.labels + labels)

    def normal(self, shape, std=1.0, dtype=COMPUTE_DTYPE) -> np.ndarray:
        return (self.generator.standard_normal(shape) * std).astype(dtype)

    def uniform(self, shape=None, low=0.0, high=1.0):
        return self.generator.uniform(low, high, shape)

    def integers(self, low, high=None, shape=None):
        return self.generator.integers(low, high, shape)

    def random(self, shape=None):
        return self.generator.random(shape)

    def permutation(self, x):
        return self.generator.permutation(x)
