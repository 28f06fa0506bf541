"""Run configuration: a ``key = value`` text file with ``#`` comments."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

VARIANTS = ("aux_loss", "loss_free", "loss_free_seq_aux", "kmeans", "none")
SOURCES = ("synthetic_clustered", "text_file")


class ConfigError(ValueError):
    def __init__(self, message, line=None, key=None):
        self.line = line
        self.key = key
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class ModelConfig:
    vocab: int = 256
    d_model: int = 64
    layers: int = 2
    experts: int = 8
    top_k: int = 2
    d_ff: int = 128
    variant: str = "loss_free"
    seed: int = 0
    steps: int = 5000
    batch_seqs: int = 16
    seq_len: int = 128
    lr_peak: float = 1e-3
    lr_min: float = 1e-4
    warmup: int = 100
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    grad_clip: float = 0.0
    lambda_aux: float = 1e-2
    lambda_z: float = 1e-3
    lambda_seq: float = 1e-3
    bias_rate: float = 1e-3
    kmeans_alpha: float = 0.99
    kmeans_gamma: float = 1e-3
    mixer_decay: float = 0.7
    data_source: str = "synthetic_clustered"
    data_path: str = ""
    clusters: int = 8
    stickiness: float = 0.97
    noise: float = 0.02
    eval_batches: int = 4
    checkpoint_every: int = 1000
    probe_layers: str = ""
    permutations: int = 10000

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("vocab", "d_model", "layers", "experts", "top_k", "d_ff", "batch_seqs", "seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1", key=name)
        if self.top_k > self.experts:
            raise ConfigError(f"top_k={self.top_k} exceeds experts={self.experts}", key="top_k")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}", key="variant")
        if self.data_source not in SOURCES:
            raise ConfigError(f"unknown data_source {self.data_source!r}", key="data_source")
        if self.data_source == "text_file" and not self.data_path:
            raise ConfigError("data_source = text_file requires data_path", key="data_path")
        if self.data_source == "synthetic_clustered" and not 1 <= self.clusters <= self.vocab:
            raise ConfigError("clusters must be in [1, vocab]", key="clusters")
        if not 0.0 <= self.kmeans_alpha < 1.0:
            raise ConfigError("kmeans_alpha must be in [0, 1)", key="kmeans_alpha")
        if self.bias_rate <= 0 or self.kmeans_gamma <= 0:
            raise ConfigError("bias rates must be positive", key="bias_rate")
        if not 0.0 <= self.mixer_decay < 1.0:
            raise ConfigError("mixer_decay must be in [0, 1)", key="mixer_decay")
        for name in ("lambda_aux", "lambda_z", "lambda_seq", "weight_decay", "grad_clip"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0", key=name)
        if self.steps < 0 or self.warmup < 0:
            raise ConfigError("steps and warmup must be >= 0", key="steps")

    @property
    def learned_router(self) -> bool:
        return self.variant != "kmeans"

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()

    def probe_layer_ids(self) -> list[int]:
        if self.probe_layers.strip():
            ids = [int(s) for s in self.probe_layers.replace(",", " ").split()]
            bad = [i for i in ids if not 0 <= i < self.layers]
            if bad:
                raise ConfigError(f"probe layer(s) {bad} outside [0, {self.layers})", key="probe_layers")
            return sorted(set(ids))
        return sorted({0, self.layers // 2, self.layers - 1})


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)


_TYPES = {f.name: f.type for f in fields(ModelConfig)}


def _convert(key, raw, line):
    kind = _TYPES[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}", line, key) from None
    return raw


def parse_config(text: str, overrides: dict | None = None) -> ModelConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", lineno)
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"unknown key {key!r}", lineno, key)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno, key)
        values[key] = _convert(key, raw, lineno)
    for key, raw in (overrides or {}).items():
        if key not in _TYPES:
            raise ConfigError(f"unknown override {key!r}", key=key)
        values[key] = _convert(key, str(raw), None)
    try:
        return ModelConfig(**values)
    except ConfigError as exc:
        line = None
        for lineno, ln in enumerate(text.splitlines(), start=1):
            if exc.key and ln.split("#", 1)[0].split("=", 1)[0].strip() == exc.key:
                line = lineno
        raise ConfigError(str(exc), line, exc.key) from None


def load_config(path, overrides: dict | None = None) -> ModelConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), overrides)
