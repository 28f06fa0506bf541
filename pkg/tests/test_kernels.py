import numpy as np
import pytest

from smoelab import kernels
from smoelab.kernels import _fallback

try:
    from smoelab.kernels import _core
except ImportError:  # extension not built
    _core = None

needs_core = pytest.mark.skipif(_core is None, reason="compiled kernels not built")


def test_topk_tie_break_and_order():
    s = np.array([[3, 1, 2], [1, 1, 1], [0, 5, 5]], dtype=np.float32)
    np.testing.assert_array_equal(kernels.topk_indices(s, 2), [[0, 2], [0, 1], [1, 2]])


def test_group_by_expert_layout():
    sel = np.array([[2, 0], [0, 1], [2, 1]])
    tokens, slots, offsets = kernels.group_by_expert(sel, 4)
    np.testing.assert_array_equal(offsets, [0, 2, 4, 6, 6])
    np.testing.assert_array_equal(tokens, [0, 1, 1, 2, 0, 2])
    np.testing.assert_array_equal(slots, [1, 0, 1, 1, 0, 0])


def test_ema_scan_matches_loop(rng):
    e = rng.normal((2, 5, 3), 1.0, np.float64)
    out = kernels.ema_scan(e, 0.7)
    ref = np.zeros_like(e)
    for b in range(2):
        prev = np.zeros(3)
        for t in range(5):
            prev = 0.7 * prev + 0.3 * e[b, t]
            ref[b, t] = prev
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_ema_scan_backward_is_adjoint(rng):
    e = rng.normal((3, 7, 4), 1.0, np.float64)
    g = rng.child("g").normal((3, 7, 4), 1.0, np.float64)
    lhs = np.sum(kernels.ema_scan(e, 0.6) * g)
    rhs = np.sum(e * kernels.ema_scan_backward(g, 0.6))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@needs_core
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_agree(rng, dtype):
    scores = rng.normal((500, 8), 1.0, dtype)
    scores[::7, 3] = scores[::7, 5]  # force ties
    np.testing.assert_array_equal(_core.topk_indices(scores, 3), _fallback.topk_indices(scores, 3))
    sel = _fallback.topk_indices(scores, 2)
    for a, b in zip(_core.group_by_expert(sel, 8), _fallback.group_by_expert(sel, 8)):
        np.testing.assert_array_equal(a, b)
    e = rng.child("e").normal((4, 33, 6), 1.0, dtype)
    np.testing.assert_array_equal(_core.ema_scan(e, 0.7), _fallback.ema_scan(e, 0.7))
    np.testing.assert_array_equal(_core.ema_scan_backward(e, 0.7), _fallback.ema_scan_backward(e, 0.7))


def test_use_backend_roundtrip():
    original = kernels.BACKEND
    kernels.use_backend("python")
    try:
        assert kernels.BACKEND == "python"
        np.testing.assert_array_equal(kernels.topk_indices(np.array([[1.0, 2.0]]), 1), [[1]])
    finally:
        if original == "cython":
            kernels.use_backend("cython")
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")


def test_topk_rejects_bad_k():
    with pytest.raises(ValueError):
        kernels.topk_indices(np.zeros((1, 3)), 4)
