"""Desk-scale SMoE language model with a hand-written backward pass.

embedding -> fixed causal EMA mixer -> L x (h += SMoE(rmsnorm(h)))
-> rmsnorm -> output head. No attention.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..balancing import aux_balance_loss, load_fractions, router_z_loss, seq_aux_loss
from ..centroid_router import CentroidState, centroid_init
from ..moe_layer import ExpertParams, RouterParams, init_layer, moe_backward, moe_forward
from ..numerics import COMPUTE_DTYPE, Rng

RMS_EPS = 1e-6
HEAD_STD = 0.02


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class Layer:
    router: RouterParams | CentroidState
    experts: list[ExpertParams]


@dataclass
class Model:
    config: object
    embedding: np.ndarray  # (V, d)
    head: np.ndarray  # (V, d)
    layers: list[Layer]

    @classmethod
    def init(cls, cfg, dtype=COMPUTE_DTYPE) -> "Model":
        rng = Rng(cfg.seed).child("init")
        emb = rng.child("embedding").normal((cfg.vocab, cfg.d_model), 1.0, dtype)
        head = rng.child("head").normal((cfg.vocab, cfg.d_model), HEAD_STD, dtype)
        layers = []
        for l in range(cfg.layers):
            router, experts = init_layer(rng.child("layer", l), cfg.experts, cfg.d_model, cfg.d_ff, dtype)
            if cfg.variant == "kmeans":
                router = centroid_init(rng.child("layer", l, "centroids"), cfg.experts, cfg.d_model,
                                       cfg.kmeans_alpha, cfg.kmeans_gamma, dtype)
            layers.append(Layer(router, experts))
        return cls(cfg, emb, head, layers)

    def learnable(self) -> dict[str, np.ndarray]:
        out = {"embedding": self.embedding, "head": self.head}
        for l, layer in enumerate(self.layers):
            if isinstance(layer.router, RouterParams):
                out[f"layer{l}.router.w_r"] = layer.router.w_r
            for i, e in enumerate(layer.experts):
                for k, v in e.arrays().items():
                    out[f"layer{l}.expert{i}.{k}"] = v
        return out

    def running_state(self) -> dict[str, np.ndarray]:
        """Non-learnable arrays: routing biases and centroids."""
        out = {}
        for l, layer in enumerate(self.layers):
            r = layer.router
            if isinstance(r, CentroidState):
                out[f"layer{l}.centroid.c"] = r.centroids
                out[f"layer{l}.centroid.bias"] = r.bias
            else:
                out[f"layer{l}.router.bias"] = r.bias
        return out

    def load_arrays(self, learnable: dict, state: dict):
        """Copy arrays into this model in place (shapes must match)."""
        for name, arr in self.learnable().items():
            _copy_into(arr, learnable, name)
        for name, arr in self.running_state().items():
            _copy_into(arr, state, name)

    def n_learnable(self) -> int:
        return sum(a.size for a in self.learnable().values())

    def astype(self, dtype) -> "Model":
        layers = []
        for layer in self.layers:
            r = layer.router
            if isinstance(r, CentroidState):
                r2 = CentroidState(r.centroids.astype(dtype), r.bias.astype(dtype), r.alpha, r.gamma)
            else:
                r2 = RouterParams(r.w_r.astype(dtype), r.bias.astype(dtype))
            experts = [ExpertParams(e.w_gate.astype(dtype), e.w_up.astype(dtype), e.w_down.astype(dtype))
                       for e in layer.experts]
            layers.append(Layer(r2, experts))
        return Model(self.config, self.embedding.astype(dtype), self.head.astype(dtype), layers)


def _copy_into(dst, src, name):
    if name not in src:
        raise KeyError(f"missing array {name!r}")
    val = np.asarray(src[name])
    if val.shape != dst.shape:
        raise ValueError(f"array {name!r} has shape {val.shape}, expected {dst.shape}")
    dst[...] = val


def rmsnorm(h):
    r = 1.0 / np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + h.dtype.type(RMS_EPS))
    return h * r, r


def rmsnorm_backward(dy, h, r):
    d = h.shape[-1]
    return r * dy - h * (r**3) * (np.sum(dy * h, axis=-1, keepdims=True) / h.dtype.type(d))


@dataclass
class ForwardResult:
    loss: float  # LM cross-entropy
    total: float  # LM + weighted auxiliary terms
    tokens: np.ndarray
    decisions: list
    tapes: list
    stats: list
    layer_inputs: list  # rmsnorm(h) per layer, (T, d)
    aux: dict = field(default_factory=dict)  # name -> list of BalanceGrads per layer
    cache: dict = field(default_factory=dict)

    @property
    def expert_evals(self) -> int:
        return sum(t.expert_evals for t in self.tapes)

    def aux_value(self, name):
        terms = self.aux.get(name)
        return None if terms is None else float(sum(g.loss for g in terms))


def active_terms(cfg) -> dict[str, float]:
    """Auxiliary loss terms and their coefficients for a routing variant."""
    if cfg.variant == "aux_loss":
        return {"aux_loss": cfg.lambda_aux, "z_loss": cfg.lambda_z}
    if cfg.variant == "loss_free_seq_aux":
        return {"seq_aux_loss": cfg.lambda_seq}
    return {}


class FrozenRouter:
    """Replays a recorded routing decision; used to hold stop-gradient
    routing fixed while finite-differencing."""

    def __init__(self, decision):
        self.decision = decision

    @property
    def n_experts(self):
        return self.decision.n_experts

    def route(self, x, k):
        return self.decision


def forward_pass(model: Model, tokens, terms: dict | None = None, routing=None) -> ForwardResult:
    """Mean next-token cross-entropy plus routing records.

    ``tokens`` is (B, S + 1). ``terms`` overrides the auxiliary terms and
    coefficients implied by the variant. ``routing`` optionally supplies a
    per-layer list of decisions to replay instead of routing afresh.
    """
    cfg = model.config
    tokens = np.asarray(tokens)
    if tokens.min() < 0 or tokens.max() >= model.embedding.shape[0]:
        raise ValueError("token id outside the vocabulary")
    terms = active_terms(cfg) if terms is None else terms
    inp, tgt = tokens[:, :-1], tokens[:, 1:]
    b, s = inp.shape
    dtype = model.embedding.dtype
    e = model.embedding[inp]
    h = kernels.ema_scan(e, cfg.mixer_decay).reshape(b * s, -1)
    decisions, tapes, stats, inputs, pre = [], [], [], [], []
    aux = {name: [] for name in terms}
    for l, layer in enumerate(model.layers):
        x, r = rmsnorm(h)
        router = layer.router if routing is None else FrozenRouter(routing[l])
        y, tape = moe_forward(router, layer.experts, x, cfg.top_k)
        pre.append((h, r))
        inputs.append(x)
        tapes.append(tape)
        dec = tape.decision
        decisions.append(dec)
        st = load_fractions(dec.selected, cfg.experts, cfg.top_k)
        stats.append(st)
        if "aux_loss" in aux:
            aux["aux_loss"].append(aux_balance_loss(st, dec.logits))
        if "z_loss" in aux:
            aux["z_loss"].append(router_z_loss(dec.logits))
        if "seq_aux_loss" in aux:
            aux["seq_aux_loss"].append(seq_aux_loss(dec.selected, dec.logits, s, cfg.experts, cfg.top_k))
        h = h + y
    hn, rf = rmsnorm(h)
    logits = hn @ model.head.T
    l64 = logits.astype(np.float64)
    m = l64.max(axis=1, keepdims=True)
    ex = np.exp(l64 - m)
    z = ex.sum(axis=1, keepdims=True)
    flat_t = tgt.reshape(-1)
    nll = (np.log(z[:, 0]) + m[:, 0]) - l64[np.arange(flat_t.size), flat_t]
    loss = float(nll.mean())
    total = loss + sum(coef * sum(g.loss for g in aux[name]) for name, coef in terms.items())
    if not np.isfinite(total):
        raise NonFiniteLoss(
            f"non-finite loss {total} (lm={loss}); max |logit|={np.abs(l64).max():.3g}, "
            f"max |h|={np.abs(h).max():.3g}"
        )
    probs = (ex / z).astype(dtype)
    cache = {"inp": inp, "tgt": flat_t, "pre": pre, "h_final": h, "r_final": rf, "hn": hn,
             "probs": probs, "shape": (b, s), "terms": dict(terms)}
    return ForwardResult(loss, total, tokens, decisions, tapes, stats, inputs, aux, cache)


def backward_pass(model: Model, fwd: ForwardResult) -> dict[str, np.ndarray]:
    """Gradient of ``fwd.total`` for every learnable array (same names as
    :meth:`Model.learnable`)."""
    cfg = model.config
    c = fwd.cache
    b, s = c["shape"]
    t = b * s
    dtype = model.embedding.dtype
    dlogits = c["probs"].copy()
    dlogits[np.arange(t), c["tgt"]] -= 1
    dlogits /= dtype.type(t)
    grads = {"head": dlogits.T @ c["hn"]}
    dh = rmsnorm_backward(dlogits @ model.head, c["h_final"], c["r_final"])
    terms = c["terms"]
    for l in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[l]
        extra = None
        for name, coef in terms.items():
            if coef == 0:
                continue
            contrib = dtype.type(coef) * fwd.aux[name][l].dlogits
            extra = contrib if extra is None else extra + contrib
        g = moe_backward(fwd.tapes[l], dh, extra)
        if g.w_r is not None:
            grads[f"layer{l}.router.w_r"] = g.w_r
        for i, eg in enumerate(g.experts):
            for k, v in eg.arrays().items():
                grads[f"layer{l}.expert{i}.{k}"] = v
        h_pre, r = c["pre"][l]
        dh = dh + rmsnorm_backward(g.x, h_pre, r)
    de = kernels.ema_scan_backward(dh.reshape(b, s, -1), cfg.mixer_decay).reshape(t, -1)
    demb = np.zeros_like(model.embedding)
    np.add.at(demb, c["inp"].reshape(-1), de)
    grads["embedding"] = demb
    return {name: grads[name] for name in model.learnable()}
