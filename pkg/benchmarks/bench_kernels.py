"""Compare the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--train-steps 5]

Each kernel runs on inputs shaped like the default desk-scale model
(batch 16 x 128 tokens, d=64, N=8, K=2, d_ff=128); the last rows time
whole training steps under each backend.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from smoelab import kernels
from smoelab.numerics import Rng
from smoelab.trainer import DataStream, Model, ModelConfig, OptimizerState, adamw_step, backward_pass, forward_pass


def kernel_cases(cfg: ModelConfig, rng: Rng):
    t = cfg.batch_seqs * cfg.seq_len
    scores = rng.child("scores").normal((t, cfg.experts), 1.0)
    selected = kernels.topk_indices(scores, cfg.top_k)
    emb = rng.child("emb").normal((cfg.batch_seqs, cfg.seq_len, cfg.d_model), 1.0)
    return {
        "topk_indices": lambda: kernels.topk_indices(scores, cfg.top_k),
        "group_by_expert": lambda: kernels.group_by_expert(selected, cfg.experts),
        "ema_scan": lambda: kernels.ema_scan(emb, cfg.mixer_decay),
        "ema_scan_backward": lambda: kernels.ema_scan_backward(emb, cfg.mixer_decay),
    }


def train_step_case(cfg: ModelConfig):
    model = Model.init(cfg)
    opt = OptimizerState.for_params(model.learnable())
    data = DataStream.from_config(cfg)
    step = [0]

    def run():
        step[0] += 1
        fwd = forward_pass(model, data.batch(step[0]))
        adamw_step(opt, model.learnable(), backward_pass(model, fwd), 1e-3)

    return run


def best_of(fn, repeat: int) -> float:
    fn()  # warm-up
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--train-steps", type=int, default=5)
    args = p.parse_args(argv)

    try:
        kernels.use_backend("cython")
    except ImportError:
        print("compiled kernels are not built; only the numpy fallback is available")
        return 1
    cfg = ModelConfig()
    backends = ("python", "cython")
    rows = []
    for name in kernel_cases(cfg, Rng(0)):
        times = {}
        for b in backends:
            kernels.use_backend(b)
            times[b] = best_of(kernel_cases(cfg, Rng(0))[name], args.repeat)
        rows.append((name, times))
    for variant in ("loss_free", "kmeans"):
        times = {}
        for b in backends:
            kernels.use_backend(b)
            times[b] = best_of(train_step_case(cfg.replace(variant=variant)), args.train_steps)
        rows.append((f"train step ({variant})", times))
    kernels.use_backend("cython")

    print(f"{'case':<26}{'numpy (ms)':>12}{'cython (ms)':>13}{'speedup':>9}")
    for name, t in rows:
        print(f"{name:<26}{t['python'] * 1e3:>12.3f}{t['cython'] * 1e3:>13.3f}{t['python'] / t['cython']:>8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
