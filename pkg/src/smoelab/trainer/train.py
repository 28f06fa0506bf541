"""Training loop: forward, backward, AdamW, then the variant's balancing update."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..balancing import bias_update
from ..centroid_router import CentroidState, centroid_bias_update, centroid_update
from ..probes import cosine_matrix, geometry_path, maxvio, write_geometry_csv
from .checkpoint import checkpoint_load, checkpoint_save
from .config import ModelConfig
from .data import DataStream
from .model import Model, NonFiniteLoss, backward_pass, forward_pass
from .optim import OptimizerState, adamw_step, clip_global_norm, lr_at

log = logging.getLogger(__name__)

AUX_COLUMNS = ("aux_loss", "z_loss", "seq_aux_loss")


def metrics_header(n_layers: int) -> list[str]:
    return (["step", "loss", "ppl", "lr", "maxvio_mean"]
            + [f"maxvio_l{l}" for l in range(n_layers)] + list(AUX_COLUMNS))


def _num(v) -> str:
    return "" if v is None else repr(float(v))


def apply_balancing(model: Model, fwd) -> None:
    """Post-step running-statistic updates: routing biases and centroids."""
    cfg = model.config
    for l, layer in enumerate(model.layers):
        stats = fwd.stats[l]
        if cfg.variant in ("loss_free", "loss_free_seq_aux"):
            layer.router.bias[...] = bias_update(layer.router.bias, stats, cfg.bias_rate)
        elif cfg.variant == "kmeans":
            state: CentroidState = layer.router
            state = centroid_update(state, fwd.layer_inputs[l], fwd.decisions[l].selected)
            layer.router = centroid_bias_update(state, stats)


def evaluate(model: Model, data: DataStream, n_batches: int) -> float:
    """Mean held-out cross-entropy (nats per token)."""
    losses = [forward_pass(model, data.batch(i, "eval"), terms={}).loss for i in range(n_batches)]
    return float(np.mean(losses)) if losses else float("nan")


def router_rows(model: Model, layer: int) -> np.ndarray:
    r = model.layers[layer].router
    return r.centroids if isinstance(r, CentroidState) else r.w_r


@dataclass
class RunResult:
    out_dir: Path
    steps: int
    final_loss: float
    eval_loss: float
    files: list = field(default_factory=list)


def _truncate_csv(path: Path, header: str, keep_through: int) -> list[str]:
    if not path.exists():
        return []
    lines = path.read_text().splitlines()
    if not lines or lines[0] != header:
        return []
    return [ln for ln in lines[1:] if ln and int(ln.split(",", 1)[0]) <= keep_through]


def train_loop(cfg: ModelConfig, out_dir, resume: str | Path | None = None) -> RunResult:
    """Train one run and write its artifacts into ``out_dir``.

    Writes ``metrics.csv``, ``maxvio.csv``, ``eval.csv``, ``config.txt``,
    ``geometry_layer<L>.csv`` for the probe layers and checkpoints under
    ``checkpoints/``. A run resumed from a checkpoint of the same config
    reproduces the uninterrupted run byte for byte.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints"
    digest = cfg.digest()
    model = Model.init(cfg)
    opt = OptimizerState.for_params(model.learnable())
    start = 0
    if resume is not None:
        start = checkpoint_load(resume, model, opt, digest)
        log.info("resumed from %s at step %d", resume, start)
    data = DataStream.from_config(cfg)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")

    header = metrics_header(cfg.layers)
    mv_header = ["step"] + [f"maxvio_l{l}" for l in range(cfg.layers)] + ["maxvio_mean"]
    metrics_path, mv_path = out / "metrics.csv", out / "maxvio.csv"
    prior = _truncate_csv(metrics_path, ",".join(header), start)
    prior_mv = _truncate_csv(mv_path, ",".join(mv_header), start)
    mfh = open(metrics_path, "w", newline="")
    vfh = open(mv_path, "w", newline="")
    mfh.write(",".join(header) + "\n")
    vfh.write(",".join(mv_header) + "\n")
    for ln in prior:
        mfh.write(ln + "\n")
    for ln in prior_mv:
        vfh.write(ln + "\n")

    loss = float("nan")
    written = []
    try:
        for step in range(start + 1, cfg.steps + 1):
            tokens = data.batch(step)
            try:
                fwd = forward_pass(model, tokens)
            except NonFiniteLoss as exc:
                log.error("step %d: %s; last checkpoint kept", step, exc)
                raise
            grads = backward_pass(model, fwd)
            if cfg.grad_clip > 0:
                clip_global_norm(grads, cfg.grad_clip)
            lr = lr_at(step, cfg.lr_peak, cfg.lr_min, cfg.warmup, cfg.steps)
            adamw_step(opt, model.learnable(), grads, lr, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
            apply_balancing(model, fwd)

            loss = fwd.loss
            mv = [maxvio(s) for s in fwd.stats]
            mv_mean = float(np.mean(mv))
            row = [str(step), _num(loss), _num(math.exp(loss)), _num(lr), _num(mv_mean)]
            row += [_num(v) for v in mv] + [_num(fwd.aux_value(c)) for c in AUX_COLUMNS]
            mfh.write(",".join(row) + "\n")
            vfh.write(",".join([str(step)] + [_num(v) for v in mv] + [_num(mv_mean)]) + "\n")
            if step % 100 == 0:
                log.info("step %d loss %.4f maxvio %.3f", step, loss, mv_mean)
            if cfg.checkpoint_every > 0 and step % cfg.checkpoint_every == 0:
                mfh.flush()
                vfh.flush()
                p = ckpt_dir / f"step{step:06d}.ckpt"
                checkpoint_save(p, model, opt, step, digest)
                written.append(p)
    finally:
        mfh.close()
        vfh.close()

    final = ckpt_dir / "final.ckpt"
    checkpoint_save(final, model, opt, cfg.steps, digest)
    eval_loss = evaluate(model, data, cfg.eval_batches)
    with open(out / "eval.csv", "w", newline="") as fh:
        fh.write("step,eval_loss,eval_ppl\n")
        fh.write(f"{cfg.steps},{_num(eval_loss)},{_num(math.exp(eval_loss))}\n")
    geo = []
    for l in cfg.probe_layer_ids():
        p = geometry_path(out, l)
        write_geometry_csv(cosine_matrix(router_rows(model, l), l), p)
        geo.append(p)
    files = [out / "config.txt", metrics_path, mv_path, out / "eval.csv", *geo, *written, final]
    return RunResult(out, cfg.steps, loss, eval_loss, files)
