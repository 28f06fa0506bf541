"""Sparse MoE layer: router scoring, top-k dispatch, SwiGLU experts, and the
hand-derived backward pass.

Everything is batched over tokens: ``x`` is ``(T, d)`` (a single ``(d,)``
vector is accepted and treated as ``T = 1``).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .numerics import COMPUTE_DTYPE, Rng, ShapeError, softmax


class WeightMode(str, enum.Enum):
    SOFTMAX_LOGITS = "softmax_logits"
    SOFTMAX_SCORES = "softmax_scores"


@dataclass
class ExpertParams:
    w_gate: np.ndarray  # (d_ff, d)
    w_up: np.ndarray  # (d_ff, d)
    w_down: np.ndarray  # (d, d_ff)

    def __post_init__(self):
        d_ff, d = self.w_gate.shape
        if self.w_up.shape != (d_ff, d) or self.w_down.shape != (d, d_ff):
            raise ShapeError(
                f"inconsistent expert shapes {self.w_gate.shape}, {self.w_up.shape}, {self.w_down.shape}"
            )

    @property
    def d(self):
        return self.w_gate.shape[1]

    @property
    def d_ff(self):
        return self.w_gate.shape[0]

    def arrays(self):
        return {"w_gate": self.w_gate, "w_up": self.w_up, "w_down": self.w_down}

    @classmethod
    def init(cls, rng: Rng, d: int, d_ff: int, dtype=COMPUTE_DTYPE) -> "ExpertParams":
        return cls(
            w_gate=rng.child("w_gate").normal((d_ff, d), 1 / np.sqrt(d), dtype),
            w_up=rng.child("w_up").normal((d_ff, d), 1 / np.sqrt(d), dtype),
            w_down=rng.child("w_down").normal((d, d_ff), 1 / np.sqrt(d_ff), dtype),
        )


@dataclass
class RoutingDecision:
    """Routing for a batch of tokens.

    ``logits`` are raw scores (router logits, or bias-free cosines for the
    centroid router); ``biased_logits`` drive selection; ``weights`` is the
    dense (T, N) combination matrix, zero off the selected set.
    """

    logits: np.ndarray
    biased_logits: np.ndarray
    selected: np.ndarray  # (T, K) int64, best first
    weights: np.ndarray
    weight_mode: WeightMode = WeightMode.SOFTMAX_LOGITS

    @property
    def stop_gradient(self) -> bool:
        return self.weight_mode is WeightMode.SOFTMAX_SCORES

    @property
    def n_tokens(self):
        return self.selected.shape[0]

    @property
    def k(self):
        return self.selected.shape[1]

    @property
    def n_experts(self):
        return self.logits.shape[1]


@dataclass
class RouterParams:
    w_r: np.ndarray  # (N, d)
    bias: np.ndarray  # (N,), non-learnable

    def __post_init__(self):
        if self.bias.shape != (self.w_r.shape[0],):
            raise ShapeError(f"router bias {self.bias.shape} does not match w_r {self.w_r.shape}")

    @property
    def n_experts(self):
        return self.w_r.shape[0]

    @classmethod
    def init(cls, rng: Rng, n: int, d: int, dtype=COMPUTE_DTYPE) -> "RouterParams":
        return cls(rng.normal((n, d), 1 / np.sqrt(d), dtype), np.zeros(n, dtype=dtype))

    def route(self, x, k) -> RoutingDecision:
        z = router_logits(self, x)
        zb = z + self.bias.astype(z.dtype)
        sel = topk_select(zb, k)
        return RoutingDecision(z, zb, sel, masked_softmax(z, sel), WeightMode.SOFTMAX_LOGITS)


def _as_tokens(x):
    x = np.asarray(x)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim != 2:
        raise ShapeError(f"expected (T, d) tokens, got shape {x.shape}")
    return x, False


def router_logits(router: RouterParams, x) -> np.ndarray:
    xt, single = _as_tokens(x)
    if xt.shape[1] != router.w_r.shape[1]:
        raise ShapeError(f"token dim {xt.shape[1]} != router dim {router.w_r.shape[1]}")
    z = xt @ router.w_r.T
    return z[0] if single else z


def topk_select(scores, k: int) -> np.ndarray:
    """Top-k indices, best first; ties go to the lower index. 1-D in, 1-D out."""
    s = np.asarray(scores)
    single = s.ndim == 1
    n = s.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"top-k with k={k} over {n} experts")
    out = kernels.topk_indices(s[None, :] if single else s, k)
    return out[0] if single else out


def masked_softmax(z, selected) -> np.ndarray:
    """Softmax over the selected entries of ``z``; zeros elsewhere."""
    z = np.asarray(z)
    sel = np.asarray(selected, dtype=np.int64)
    single = z.ndim == 1
    if single:
        z, sel = z[None, :], sel[None, :]
    if sel.shape[1] == 0:
        raise ValueError("masked softmax over an empty selection")
    if sel.min() < 0 or sel.max() >= z.shape[1]:
        raise IndexError("selected expert index out of range")
    rows = np.arange(z.shape[0])[:, None]
    p = np.zeros_like(z)
    p[rows, sel] = softmax(z[rows, sel], axis=1)
    return p[0] if single else p


def expert_forward(e: ExpertParams, x):
    """SwiGLU expert. Returns ``(output, cache)`` with the intermediates the
    backward pass needs."""
    xt, single = _as_tokens(x)
    if xt.shape[1] != e.d:
        raise ShapeError(f"token dim {xt.shape[1]} != expert dim {e.d}")
    gate_pre = xt @ e.w_gate.T
    s, gate = kernels.swiglu_gate(gate_pre)
    up = xt @ e.w_up.T
    hidden = gate * up
    out = hidden @ e.w_down.T
    cache = ExpertCache(x=xt, gate_pre=gate_pre, gate_sig=s, gate=gate, up=up, hidden=hidden, out=out)
    return (out[0] if single else out), cache


@dataclass
class ExpertCache:
    x: np.ndarray
    gate_pre: np.ndarray
    gate_sig: np.ndarray
    gate: np.ndarray
    up: np.ndarray
    hidden: np.ndarray
    out: np.ndarray
    tokens: np.ndarray | None = None  # batch rows routed here
    slots: np.ndarray | None = None


@dataclass
class LayerTape:
    x: np.ndarray
    decision: RoutingDecision
    router: object
    experts: list
    caches: dict = field(default_factory=dict)
    single: bool = False

    @property
    def expert_evals(self) -> int:
        return sum(c.tokens.size for c in self.caches.values())


@dataclass
class LayerGrads:
    w_r: np.ndarray | None  # None for the centroid router
    bias: np.ndarray
    experts: list  # ExpertParams-shaped gradients
    x: np.ndarray


def moe_forward(router, experts, x, k: int, weight_mode: WeightMode | str | None = None):
    """Sparse MoE output ``y = sum_{i in T_K} p_i E_i(x)``.

    ``router`` is a :class:`RouterParams` or a centroid state; either must
    provide ``route(x, k)``. Only experts that received at least one token
    are touched.
    """
    xt, single = _as_tokens(x)
    if len(experts) != router.n_experts:
        raise ShapeError(f"{len(experts)} experts for a router over {router.n_experts}")
    decision = router.route(xt, k)
    if weight_mode is not None and WeightMode(weight_mode) is not decision.weight_mode:
        raise ValueError(f"router produces {decision.weight_mode.value}, not {WeightMode(weight_mode).value}")
    tokens, slots, offsets = kernels.group_by_expert(decision.selected, len(experts))
    y = np.zeros_like(xt)
    tape = LayerTape(x=xt, decision=decision, router=router, experts=experts, single=single)
    for i in range(len(experts)):
        lo, hi = offsets[i], offsets[i + 1]
        if lo == hi:
            continue
        idx = tokens[lo:hi]
        out, cache = expert_forward(experts[i], xt[idx])
        cache.tokens = idx
        cache.slots = slots[lo:hi]
        tape.caches[i] = cache
        y[idx] += decision.weights[idx, i][:, None] * out
    return (y[0] if single else y), tape


def moe_backward(tape: LayerTape, upstream, extra_dlogits=None) -> LayerGrads:
    """Analytic gradients of a layer given ``dL/dy``.

    ``extra_dlogits`` adds a (T, N) gradient on the raw router logits, which
    is how auxiliary balancing losses enter. Unselected experts get exact
    zeros; top-k selection itself is not differentiated.
    """
    dy, _ = _as_tokens(upstream)
    xt = tape.x
    if dy.shape != xt.shape:
        raise ShapeError(f"upstream {dy.shape} does not match layer output {xt.shape}")
    dec = tape.decision
    n = dec.n_experts
    dx = np.zeros_like(xt)
    dp = np.zeros_like(dec.weights)
    expert_grads = []
    for i, e in enumerate(tape.experts):
        c = tape.caches.get(i)
        if c is None:
            expert_grads.append(
                ExpertParams(np.zeros_like(e.w_gate), np.zeros_like(e.w_up), np.zeros_like(e.w_down))
            )
            continue
        idx = c.tokens
        dyi = dy[idx]
        dp[idx, i] = np.sum(dyi * c.out, axis=1)
        dout = dec.weights[idx, i][:, None] * dyi
        dw_down = dout.T @ c.hidden
        dhidden = dout @ e.w_down
        dup = dhidden * c.gate
        dgate = dhidden * c.up
        dgate_pre = dgate * (c.gate_sig * (1 + c.gate_pre * (1 - c.gate_sig)))
        dw_up = dup.T @ c.x
        dw_gate = dgate_pre.T @ c.x
        dx[idx] += dup @ e.w_up + dgate_pre @ e.w_gate
        expert_grads.append(ExpertParams(dw_gate, dw_up, dw_down))

    bias_grad = np.zeros(n, dtype=xt.dtype)
    if dec.stop_gradient:
        if extra_dlogits is not None:
            raise ValueError("centroid routing has no logits to differentiate")
        return LayerGrads(None, bias_grad, expert_grads, dx[0] if tape.single else dx)

    # softmax Jacobian restricted to T_K: dz_j = p_j (dp_j - sum_l p_l dp_l)
    p = dec.weights
    dz = p * (dp - np.sum(p * dp, axis=1, keepdims=True))
    if extra_dlogits is not None:
        extra = np.asarray(extra_dlogits, dtype=dz.dtype)
        if extra.shape != dz.shape:
            raise ShapeError(f"extra logit gradient {extra.shape} != {dz.shape}")
        dz = dz + extra
    w_r = tape.router.w_r
    dw_r = dz.T @ xt
    dx += dz @ w_r
    return LayerGrads(dw_r, bias_grad, expert_grads, dx[0] if tape.single else dx)


def init_layer(rng: Rng, n: int, d: int, d_ff: int, dtype=COMPUTE_DTYPE):
    router = RouterParams.init(rng.child("router"), n, d, dtype)
    experts = [ExpertParams.init(rng.child("expert", i), d, d_ff, dtype) for i in range(n)]
    return router, experts
