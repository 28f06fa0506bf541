"""Token streams: a sticky clustered synthetic source and byte-level text."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..numerics import Rng


def cluster_vocab(clusters: int, vocab: int) -> list[np.ndarray]:
    """Split ``[0, vocab)`` into ``clusters`` contiguous sub-vocabularies."""
    if not 1 <= clusters <= vocab:
        raise ValueError(f"cannot split vocab {vocab} into {clusters} clusters")
    bounds = np.linspace(0, vocab, clusters + 1).round().astype(int)
    return [np.arange(bounds[i], bounds[i + 1]) for i in range(clusters)]


def cluster_unigrams(rng: Rng, subvocabs) -> list[np.ndarray]:
    """Zipf-shaped token distribution per cluster, with a random rank order."""
    out = []
    for c, sv in enumerate(subvocabs):
        w = 1.0 / np.arange(1, sv.size + 1)
        w = w[rng.child("zipf", c).permutation(sv.size)]
        out.append(w / w.sum())
    return out


def synth_data_gen(rng: Rng, clusters: int, vocab: int, seq_len: int, n_seqs: int = 1,
                   stickiness: float = 0.97, noise: float = 0.02, structure_rng: Rng | None = None):
    """Sticky hidden-Markov token stream.

    Each position belongs to a hidden cluster that persists with probability
    ``stickiness``; tokens come from that cluster's sub-vocabulary, except
    that with probability ``noise`` a token is drawn uniformly from the full
    vocabulary. Returns ``(tokens, labels)``, both ``(n_seqs, seq_len)``.

    ``structure_rng`` fixes the per-cluster distributions; it defaults to a
    child of ``rng`` but the trainer passes a run-wide stream so every batch
    shares the same clusters.
    """
    if clusters > vocab:
        raise ValueError("more clusters than vocabulary entries")
    subvocabs = cluster_vocab(clusters, vocab)
    probs = cluster_unigrams(structure_rng or rng.child("structure"), subvocabs)
    g = rng.generator
    labels = np.empty((n_seqs, seq_len), dtype=np.int64)
    state = g.integers(0, clusters, n_seqs)
    for t in range(seq_len):
        if t > 0 and clusters > 1:
            switch = g.random(n_seqs) >= stickiness
            # jump to a uniformly chosen different cluster
            jump = g.integers(1, clusters, n_seqs)
            state = np.where(switch, (state + jump) % clusters, state)
        labels[:, t] = state
    tokens = np.empty_like(labels)
    for c in range(clusters):
        mask = labels == c
        cnt = int(mask.sum())
        if cnt:
            tokens[mask] = g.choice(subvocabs[c], size=cnt, p=probs[c])
    noisy = g.random(labels.shape) < noise
    tokens[noisy] = g.integers(0, vocab, int(noisy.sum()))
    return tokens, labels


def segment_purity(tokens, labels, clusters: int, vocab: int) -> float:
    """Fraction of tokens lying in the sub-vocabulary of their hidden cluster."""
    subvocabs = cluster_vocab(clusters, vocab)
    lo = np.array([sv[0] for sv in subvocabs])
    hi = np.array([sv[-1] for sv in subvocabs])
    ok = (tokens >= lo[labels]) & (tokens <= hi[labels])
    return float(ok.mean())


@dataclass
class DataStream:
    """Deterministic batch source: batch ``s`` depends only on (seed, s)."""

    source: str
    seed: int
    vocab: int
    seq_len: int
    batch_seqs: int
    clusters: int = 8
    stickiness: float = 0.97
    noise: float = 0.02
    path: str = ""

    def __post_init__(self):
        self._rng = Rng(self.seed).child("data")
        self._bytes = None
        if self.source == "text_file":
            raw = np.frombuffer(Path(self.path).read_bytes(), dtype=np.uint8).astype(np.int64)
            if raw.size < 2 * (self.seq_len + 1):
                raise ValueError(f"text file {self.path} too short for seq_len={self.seq_len}")
            if self.vocab < 256:
                raise ValueError("byte-level text needs vocab >= 256")
            split = int(raw.size * 0.9)
            self._bytes = (raw[:split], raw[split:])
        elif self.source != "synthetic_clustered":
            raise ValueError(f"unknown data source {self.source!r}")

    @classmethod
    def from_config(cls, cfg) -> "DataStream":
        return cls(cfg.data_source, cfg.seed, cfg.vocab, cfg.seq_len, cfg.batch_seqs,
                   cfg.clusters, cfg.stickiness, cfg.noise, cfg.data_path)

    def batch(self, step: int, split: str = "train", n_seqs: int | None = None) -> np.ndarray:
        """(n_seqs, seq_len + 1) token ids: inputs plus the shifted targets."""
        n = n_seqs or self.batch_seqs
        rng = self._rng.child(split, step)
        if self._bytes is None:
            toks, _ = synth_data_gen(rng, self.clusters, self.vocab, self.seq_len + 1, n,
                                     self.stickiness, self.noise, self._rng.child("structure"))
            return toks
        region = self._bytes[0] if split == "train" else self._bytes[1]
        if region.size < self.seq_len + 1:
            region = self._bytes[0]
        starts = rng.integers(0, region.size - self.seq_len, n)
        return np.stack([region[s : s + self.seq_len + 1] for s in starts])
