"""Finite-difference validation of the hand-written backward passes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .moe_layer import init_layer, moe_backward, moe_forward
from .numerics import Rng, finite_diff_grad
from .trainer.config import VARIANTS, ModelConfig
from .trainer.data import DataStream
from .trainer.model import Model, backward_pass, forward_pass

GROUPS = ("w_r", "w_gate", "w_up", "w_down", "embedding", "head")
TOLERANCE = 2e-3
TINY_CONFIG = dict(vocab=8, d_model=8, layers=1, experts=4, top_k=2, d_ff=8, batch_seqs=2, seq_len=8,
                   clusters=2)


@dataclass
class GroupResult:
    group: str
    max_rel_err: float
    worst: tuple  # (array name, flat index, analytic, numeric)
    checked: int
    skipped: int  # coordinates whose perturbation flipped a top-k selection


def group_of(name: str) -> str:
    leaf = name.rsplit(".", 1)[-1]
    return leaf if leaf in GROUPS else name


def rel_errors(analytic, numeric, scale):
    """|a - n| / max(|a|, |n|, scale) elementwise."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), scale)


def compare(analytic: dict, numeric: dict, scale_frac: float = 1e-3) -> dict[str, GroupResult]:
    """Per-group worst relative error.

    The denominator floor is ``scale_frac`` times the group's largest
    analytic entry, so coordinates many orders below the group's scale are
    judged on absolute rather than relative error.
    """
    out = {}
    by_group: dict = {}
    for name in numeric:
        by_group.setdefault(group_of(name), []).append(name)
    for g, names in by_group.items():
        scale = max(float(np.max(np.abs(analytic[n]))) for n in names) * scale_frac
        scale = max(scale, 1e-12)
        worst, worst_at, checked, skipped = 0.0, (None, -1, 0.0, 0.0), 0, 0
        for n in names:
            a = np.asarray(analytic[n], dtype=np.float64).ravel()
            num = numeric[n].ravel()
            ok = np.isfinite(num)
            skipped += int(np.count_nonzero(~ok))
            checked += int(np.count_nonzero(ok))
            if not ok.any():
                continue
            err = rel_errors(a[ok], num[ok], scale)
            j = int(np.argmax(err))
            if err[j] > worst or worst_at[0] is None:
                idx = int(np.flatnonzero(ok)[j])
                worst, worst_at = float(err[j]), (n, idx, float(a[idx]), float(num[idx]))
        out[g] = GroupResult(g, worst, worst_at, checked, skipped)
    return out


def _selection_signature(fwd):
    return tuple(d.selected.tobytes() for d in fwd.decisions)


def model_gradcheck(cfg: ModelConfig, dtype=np.float64, h: float = 1e-3, seed: int = 0):
    """Whole-model check of ``backward_pass`` against central differences."""
    model = Model.init(cfg).astype(dtype)
    rng = Rng(seed).child("gradcheck", cfg.variant)
    if cfg.variant in ("loss_free", "loss_free_seq_aux", "kmeans"):
        for l, layer in enumerate(model.layers):
            layer.router.bias[...] = rng.child("bias", l).normal(layer.router.bias.shape, 0.05, dtype)
    tokens = DataStream.from_config(cfg).batch(1)
    fwd = forward_pass(model, tokens)
    analytic = backward_pass(model, fwd)

    # stop-gradient routing (centroid router) is replayed, not re-derived
    frozen = fwd.decisions if any(d.stop_gradient for d in fwd.decisions) else None

    def objective():
        f = forward_pass(model, tokens, routing=frozen)
        return f.total, _selection_signature(f)

    numeric = finite_diff_grad(objective, model.learnable(), h)
    return compare(analytic, numeric)


def layer_gradcheck(n=4, k=2, d=8, d_ff=16, n_tokens=16, dtype=np.float64, h: float = 1e-3, seed: int = 0):
    """Single-layer check with loss ``sum_t u_t . y_t`` for a fixed random ``u``.

    The token input ``x`` is checked too (group ``x``).
    """
    rng = Rng(seed).child("layer-gradcheck")
    router, experts = init_layer(rng.child("params"), n, d, d_ff, dtype)
    x = rng.child("x").normal((n_tokens, d), 1.0, dtype)
    u = rng.child("u").normal((n_tokens, d), 1.0, dtype)
    y, tape = moe_forward(router, experts, x, k)
    g = moe_backward(tape, u)
    params = {"w_r": router.w_r, "x": x}
    analytic = {"w_r": g.w_r, "x": g.x}
    for i, e in enumerate(experts):
        for name, arr in e.arrays().items():
            params[f"expert{i}.{name}"] = arr
            analytic[f"expert{i}.{name}"] = getattr(g.experts[i], name)

    def objective():
        yy, tp = moe_forward(router, experts, x, k)
        return float(np.sum(u.astype(np.float64) * yy)), tp.decision.selected.tobytes()

    numeric = finite_diff_grad(objective, params, h)
    return compare(analytic, numeric)


def run_all(base: ModelConfig, variants=VARIANTS, dtype=np.float64, h: float = 1e-3):
    """Layer check plus whole-model check for each variant: ``{label: {group: GroupResult}}``."""
    results = {"layer": layer_gradcheck(dtype=dtype, h=h, seed=base.seed)}
    for v in variants:
        results[f"model/{v}"] = model_gradcheck(base.replace(variant=v), dtype=dtype, h=h, seed=base.seed)
    return results
