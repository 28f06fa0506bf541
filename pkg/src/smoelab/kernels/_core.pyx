# cython: language_level=3
"""Compiled routing and scan kernels; results match the numpy fallback."""
import numpy as np
cimport numpy as cnp
from cython cimport floating

cnp.import_array()


def topk_indices(floating[:, :] scores, Py_ssize_t k):
    cdef Py_ssize_t t = scores.shape[0]
    cdef Py_ssize_t n = scores.shape[1]
    if k < 1 or k > n:
        raise ValueError(f"k={k} outside [1, {n}]")
    out = np.empty((t, k), dtype=np.int64)
    cdef cnp.int64_t[:, :] o = out
    cdef Py_ssize_t row, j, m, pos
    cdef floating v
    with nogil:
        for row in range(t):
            # insertion into a sorted prefix; strict > keeps the earlier index on ties
            for j in range(n):
                v = scores[row, j]
                if j < k:
                    pos = j
                elif v > scores[row, o[row, k - 1]]:
                    pos = k - 1
                else:
                    continue
                while pos > 0 and v > scores[row, o[row, pos - 1]]:
                    o[row, pos] = o[row, pos - 1]
                    pos -= 1
                o[row, pos] = j
    return out


def group_by_expert(cnp.int64_t[:, :] selected, Py_ssize_t n):
    cdef Py_ssize_t t = selected.shape[0]
    cdef Py_ssize_t k = selected.shape[1]
    offsets = np.zeros(n + 1, dtype=np.int64)
    tokens = np.empty(t * k, dtype=np.int64)
    slots = np.empty(t * k, dtype=np.int64)
    cursor = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[:] off = offsets
    cdef cnp.int64_t[:] tok = tokens
    cdef cnp.int64_t[:] slt = slots
    cdef cnp.int64_t[:] cur = cursor
    cdef Py_ssize_t i, j, e, p
    for i in range(t):
        for j in range(k):
            e = selected[i, j]
            if e < 0 or e >= n:
                raise ValueError(f"expert index {e} outside [0, {n})")
            off[e + 1] += 1
    with nogil:
        for e in range(n):
            off[e + 1] += off[e]
            cur[e] = off[e]
        for i in range(t):
            for j in range(k):
                e = selected[i, j]
                p = cur[e]
                tok[p] = i
                slt[p] = j
                cur[e] = p + 1
    return tokens, slots, offsets


def ema_scan(floating[:, :, :] e, double decay):
    cdef Py_ssize_t nb = e.shape[0], ns = e.shape[1], nd = e.shape[2]
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((nb, ns, nd), dtype=dtype)
    cdef floating[:, :, :] o = out
    cdef floating a = <floating>decay
    cdef floating b = <floating>(1.0 - decay)
    cdef floating prev
    cdef Py_ssize_t i, s, j
    with nogil:
        for i in range(nb):
            for j in range(nd):
                prev = 0
                for s in range(ns):
                    prev = a * prev + b * e[i, s, j]
                    o[i, s, j] = prev
    return out


def ema_scan_backward(floating[:, :, :] g, double decay):
    cdef Py_ssize_t nb = g.shape[0], ns = g.shape[1], nd = g.shape[2]
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((nb, ns, nd), dtype=dtype)
    cdef floating[:, :, :] o = out
    cdef floating a = <floating>decay
    cdef floating b = <floating>(1.0 - decay)
    cdef floating acc
    cdef Py_ssize_t i, s, j
    with nogil:
        for i in range(nb):
            for j in range(nd):
                acc = 0
                for s in range(ns - 1, -1, -1):
                    acc = g[i, s, j] + a * acc
                    o[i, s, j] = b * acc
    return out

