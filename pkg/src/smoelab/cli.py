"""``smoelab`` command line: train, gradcheck, probe, report."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .gradcheck import GROUPS, TINY_CONFIG, TOLERANCE, run_all
from .numerics import Rng
from .probes import (
    MIN_PAIRS,
    correlation_from_records,
    cosine_matrix,
    coupling_probe,
    geometry_path,
    routed_records,
    write_geometry_csv,
)
from .trainer import (
    CheckpointError,
    ConfigError,
    DataStream,
    Model,
    checkpoint_load,
    forward_pass,
    load_config,
    parse_config,
    train_loop,
)
from .trainer.checkpoint import load_arrays
from .trainer.config import VARIANTS, ModelConfig
from .trainer.train import router_rows

log = logging.getLogger("smoelab")

OUT_ROOT_ENV = "SMOELAB_OUT"
LOCK_NAME = ".smoelab.lock"
MANIFEST_NAME = "manifest.json"


class CommandError(Exception):
    """Reported as ``error: <message>`` with exit status 2."""


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@contextmanager
def output_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CommandError(f"{out} is locked by another run ({lock}); remove the lock if that run is dead") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _overrides(args) -> dict:
    return {k: v for k, v in (("seed", args.seed), ("steps", args.steps), ("variant", args.variant)) if v is not None}


def _load(path, overrides=None) -> ModelConfig:
    try:
        return load_config(path, overrides)
    except FileNotFoundError:
        raise CommandError(f"config file not found: {path}") from None
    except ConfigError as exc:
        raise CommandError(f"{path}: {exc}") from None


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out: Path, cfg: ModelConfig, overrides: dict, files, started: str, finished: str):
    entries = []
    for p in sorted({Path(f) for f in files}):
        entries.append({"path": p.relative_to(out).as_posix(), "sha256": sha256_file(p), "bytes": p.stat().st_size})
    manifest = {
        "smoelab_version": __version__,
        "kernel_backend": kernels.BACKEND,
        "config": cfg.to_text(),
        "config_digest": cfg.digest().hex(),
        "overrides": overrides,
        "seed": cfg.seed,
        "started": started,
        "finished": finished,
        "out_dir": str(out.resolve()),
        "files": entries,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _default_out(cfg: ModelConfig, config_path) -> Path:
    root = os.environ.get(OUT_ROOT_ENV)
    if not root:
        raise CommandError(f"no --out given and ${OUT_ROOT_ENV} is not set")
    return Path(root) / f"{Path(config_path).stem}-{cfg.variant}-s{cfg.seed}"


def cmd_train(args) -> int:
    overrides = _overrides(args)
    cfg = _load(args.config, overrides)
    out = Path(args.out) if args.out else _default_out(cfg, args.config)
    with output_lock(out):
        started = _now()
        try:
            res = train_loop(cfg, out, resume=args.resume)
        except CheckpointError as exc:
            raise CommandError(str(exc)) from None
        manifest = write_manifest(out, cfg, overrides, res.files, started, _now())
    metrics = next(e["sha256"] for e in manifest["files"] if e["path"] == "metrics.csv")
    print(f"trained {cfg.variant} for {res.steps} steps: final loss {res.final_loss:.4f}, "
          f"eval ppl {math.exp(res.eval_loss):.3f}")
    print(f"metrics.csv sha256 {metrics}")
    print(f"artifacts in {out}")
    return 0


def cmd_gradcheck(args) -> int:
    if args.config:
        base = _load(args.config)
    else:
        base = ModelConfig(**TINY_CONFIG)
    variants = [args.variant] if args.variant else list(VARIANTS)
    dtype = np.float64 if args.dtype == "float64" else np.float32
    results = run_all(base, variants, dtype=dtype, h=args.step)
    failures = []
    for label, groups in results.items():
        for g in [*GROUPS, "x"]:
            r = groups.get(g)
            if r is None:
                continue
            ok = r.max_rel_err <= args.tolerance
            print(f"{label:<26} {g:<10} max_rel_err={r.max_rel_err:.3e} checked={r.checked} "
                  f"skipped={r.skipped} {'ok' if ok else 'FAIL'}")
            if not ok:
                failures.append((label, r))
    if failures:
        print(f"gradient check FAILED (tolerance {args.tolerance:g}); worst coordinates:")
        for label, r in failures:
            name, idx, a, n = r.worst
            print(f"  {label} {name}[{idx}]: analytic={a:.6e} numeric={n:.6e} rel_err={r.max_rel_err:.3e}")
        return 1
    print(f"gradient check passed (tolerance {args.tolerance:g})")
    return 0


def _load_checkpoint(args) -> tuple[ModelConfig, Model]:
    cfg = _load(args.config)
    try:
        digest, _ = load_arrays(args.checkpoint)
    except FileNotFoundError:
        raise CommandError(f"checkpoint not found: {args.checkpoint}") from None
    except CheckpointError as exc:
        raise CommandError(str(exc)) from None
    if digest != cfg.digest():
        raise CommandError(
            f"checkpoint {args.checkpoint} was written for config digest {digest.hex()[:16]}, "
            f"but {args.config} has digest {cfg.digest().hex()[:16]}"
        )
    model = Model.init(cfg)
    checkpoint_load(args.checkpoint, model, digest=cfg.digest())
    return cfg, model


def _probe_layers(cfg: ModelConfig, spec: str | None) -> list[int]:
    try:
        return cfg.replace(probe_layers=spec).probe_layer_ids() if spec else cfg.probe_layer_ids()
    except (ConfigError, ValueError) as exc:
        raise CommandError(str(exc)) from None


def _eval_stream(cfg: ModelConfig, data):
    if data:
        cfg = cfg.replace(data_source="text_file", data_path=str(data))
    try:
        return DataStream.from_config(cfg)
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot read probe data: {exc}") from None


def _layer_inputs(model: Model, stream: DataStream, batches: int):
    per_layer = None
    for b in range(batches):
        fwd = forward_pass(model, stream.batch(b, "eval"), terms={})
        xs = fwd.layer_inputs
        per_layer = [x.copy() for x in xs] if per_layer is None else [
            np.concatenate([p, x]) for p, x in zip(per_layer, xs)]
    return per_layer


def _probe_geometry(cfg, model, args, out: Path) -> int:
    for l in _probe_layers(cfg, args.layers):
        rep = cosine_matrix(router_rows(model, l), l)
        write_geometry_csv(rep, geometry_path(out, l))
        extra = f" zero_rows={rep.zero_rows}" if rep.zero_rows else ""
        print(f"layer {l}: mu={rep.mu:.6f}{extra}")
    return 0


def _probe_coupling(cfg, model, args, out: Path) -> int:
    stream = _eval_stream(cfg, args.data)
    inputs = _layer_inputs(model, stream, 1)
    n_tok = min(args.tokens, inputs[0].shape[0])
    with_aux = cfg.variant == "aux_loss"
    path = out / "coupling.csv"
    worst, unselected, degenerate = 1.0, 0, 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["layer", "token", "expert", "kind", "row", "abs_cos"])
        for l in _probe_layers(cfg, args.layers):
            layer = model.layers[l]
            rep = coupling_probe(layer.router, layer.experts, inputs[l][:n_tok], cfg.top_k,
                                 rng=Rng(cfg.seed).child("coupling-probe", l), with_aux=with_aux)
            for t, i, kind, r, c in rep.rows():
                w.writerow([l, t, i, kind, r, f"{c:.10f}"])
            worst = min(worst, rep.min_cos)
            unselected += rep.unselected_nonzero
            degenerate += rep.degenerate
            line = (f"layer {l}: tokens={n_tok} min_abs_cos={rep.min_cos:.8f} "
                    f"unselected_nonzero={rep.unselected_nonzero} degenerate={rep.degenerate}")
            if with_aux:
                line += f" aux_zero_rows={rep.aux_zero_rows}"
            print(line)
    print(f"min coupling cosine {worst:.8f}; unselected rows with nonzero gradient: {unselected}")
    return 0


def _probe_correlation(cfg, model, args, out: Path) -> int:
    stream = _eval_stream(cfg, args.data)
    batches = args.batches or cfg.eval_batches
    inputs = _layer_inputs(model, stream, batches)
    routers = [layer.router for layer in model.layers]
    experts = [layer.experts for layer in model.layers]
    records = routed_records(inputs, routers, experts, cfg.top_k)
    rep = correlation_from_records(records, permutations=args.permutations or cfg.permutations, seed=cfg.seed)
    rep.write_csv(out / "correlation_pairs.csv")
    status = "insufficient" if rep.insufficient else "ok"
    print(f"pairs={rep.n_pairs} (routed {len(records)}, min {MIN_PAIRS}) rho={rep.rho:.6f} "
          f"p={rep.p_value:.3e} status={status}")
    return 0


PROBES = {"geometry": _probe_geometry, "coupling": _probe_coupling, "correlation": _probe_correlation}


def cmd_probe(args) -> int:
    cfg, model = _load_checkpoint(args)
    out = Path(args.out)
    with output_lock(out):
        return PROBES[args.kind](cfg, model, args, out)


def _read_metrics(run: Path):
    path = run / "metrics.csv"
    if not path.is_file():
        raise CommandError(f"{run}: no metrics.csv in this run directory")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return rows


def _run_config(run: Path) -> ModelConfig | None:
    p = run / "config.txt"
    if not p.is_file():
        return None
    try:
        return parse_config(p.read_text(encoding="utf-8"))
    except ConfigError:
        return None


def rolling_mean(values, window: int) -> list[float]:
    """Trailing mean over the last ``window`` values (fewer at the start)."""
    out, acc = [], 0.0
    vals = [float(v) for v in values]
    for i, v in enumerate(vals):
        acc += v
        if i >= window:
            acc -= vals[i - window]
        out.append(acc / min(i + 1, window))
    return out


def _fmt_table(header, rows) -> str:
    cells = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    if args.window < 1:
        raise CommandError("--window must be >= 1")
    out = Path(args.out)
    runs = [Path(r) for r in args.runs]
    loaded = [(r, _read_metrics(r), _run_config(r)) for r in runs]
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "variant", "step", "ppl", "maxvio_mean", "maxvio_mean_rolling"])
        for run, rows, cfg in loaded:
            variant = cfg.variant if cfg else ""
            roll = rolling_mean([r["maxvio_mean"] for r in rows], args.window)
            for r, m in zip(rows, roll):
                w.writerow([run.name, variant, r["step"], r["ppl"], r["maxvio_mean"], repr(m)])
            eval_ppl = ""
            ev = run / "eval.csv"
            if ev.is_file():
                with open(ev, newline="") as efh:
                    erows = list(csv.DictReader(efh))
                if erows:
                    eval_ppl = f"{float(erows[-1]['eval_ppl']):.3f}"
            router_params = ""
            if cfg:
                router_params = 0 if cfg.variant == "kmeans" else cfg.layers * cfg.experts * cfg.d_model
            last = rows[-1] if rows else None
            summary.append([
                run.name, variant or "?", last["step"] if last else 0,
                f"{float(last['ppl']):.3f}" if last else "", eval_ppl,
                f"{roll[-1]:.4f}" if roll else "", router_params,
            ])
    header = ["run", "variant", "steps", "train_ppl", "eval_ppl", f"maxvio_roll{args.window}", "router_params"]
    table = _fmt_table(header, summary)
    (out / "summary.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smoelab", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one run")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help=f"output directory (default: ${OUT_ROOT_ENV}/<config>-<variant>-s<seed>)")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int)
    t.add_argument("--variant", choices=VARIANTS)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("gradcheck", help="finite-difference check of every backward pass")
    g.add_argument("--config", help="base config (default: the built-in tiny config)")
    g.add_argument("--variant", choices=VARIANTS, help="check only this variant")
    g.add_argument("--tolerance", type=float, default=TOLERANCE)
    g.add_argument("--step", type=float, default=1e-3, help="finite-difference step h")
    g.add_argument("--dtype", choices=("float64", "float32"), default="float64")
    g.set_defaults(func=cmd_gradcheck)

    pr = sub.add_parser("probe", help="run a probe on a checkpoint")
    pr.add_argument("kind", choices=sorted(PROBES))
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--config", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--data", help="UTF-8 text file to probe on (default: the config's eval stream)")
    pr.add_argument("--layers", help="comma-separated layer ids (default: config probe_layers)")
    pr.add_argument("--tokens", type=int, default=256, help="tokens per layer for the coupling probe")
    pr.add_argument("--batches", type=int, help="eval batches for the correlation probe")
    pr.add_argument("--permutations", type=int, help="permutation count for the p-value")
    pr.set_defaults(func=cmd_probe)

    r = sub.add_parser("report", help="compare runs")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out", required=True)
    r.add_argument("--window", type=int, default=200, help="rolling-mean window for MaxVio")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
