"""Probes for router/expert geometry: gradient coupling, score-activation
correlation, router cosine structure, and the MaxVio load metric."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .balancing import LoadStats, aux_balance_loss, load_fractions
from .moe_layer import moe_backward, moe_forward
from .numerics import COSINE_EPS, Rng, SpearmanResult, cosine_rows, spearman_rho

MIN_GROUP = 20
MIN_PAIRS = 100
MAX_EXPERT_ROWS = 64


def maxvio(stats: LoadStats) -> float:
    """max_i f_i / mean(f) - 1; zero when perfectly balanced."""
    f = stats.fractions
    return max(float(f.max() * f.shape[0] - 1.0), 0.0)


@dataclass
class MaxVioReport:
    per_layer: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_layer))


@dataclass
class GeometryReport:
    layer: int
    matrix: np.ndarray
    mu: float
    zero_rows: list[int] = field(default_factory=list)


def cosine_matrix(w, layer: int = 0) -> GeometryReport:
    """Pairwise row cosines and their off-diagonal mean.

    Zero rows follow the zero-vector cosine convention (0 against
    everything, including themselves) and are listed in ``zero_rows``.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] < 2:
        raise ValueError(f"cosine matrix needs at least two rows, got shape {w.shape}")
    norms = np.linalg.norm(w, axis=1)
    gram = w @ w.T
    denom = np.maximum(np.outer(norms, norms), COSINE_EPS)
    c = np.clip(gram / denom, -1.0, 1.0)
    c = 0.5 * (c + c.T)
    zero = [int(i) for i in np.flatnonzero(norms == 0)]
    live = norms > 0
    np.fill_diagonal(c, np.where(live, 1.0, 0.0))
    n = w.shape[0]
    mu = float((c.sum() - np.trace(c)) / (n * (n - 1)))
    return GeometryReport(layer, c, mu, zero)


@dataclass
class CouplingReport:
    router_cos: list = field(default_factory=list)  # (token, expert, |cos|)
    row_cos: list = field(default_factory=list)  # (token, expert, kind, row, |cos|)
    unselected_nonzero: int = 0
    degenerate: int = 0
    aux_zero_rows: int | None = None
    aux_token_cos: list = field(default_factory=list)  # (token, expert, |cos|)

    def all_cosines(self):
        return [c for *_, c in self.router_cos] + [c for *_, c in self.row_cos]

    @property
    def min_cos(self) -> float:
        vals = self.all_cosines()
        return float(min(vals)) if vals else float("nan")

    def rows(self):
        """One ``(token, expert, kind, row, abs_cos)`` tuple per measurement."""
        for t, i, c in self.router_cos:
            yield t, i, "router", "", c
        yield from self.row_cos
        for t, i, c in self.aux_token_cos:
            yield t, i, "aux_router", "", c

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["token", "expert", "kind", "row", "abs_cos"])
            for t, i, kind, r, c in self.rows():
                w.writerow([t, i, kind, r, f"{c:.10f}"])


def _abs_cos_rows(rows, x, report, tol=1e-12):
    """|cos| of each gradient row against x; zero-norm rows are counted as degenerate."""
    norms = np.linalg.norm(rows.astype(np.float64), axis=1)
    ok = norms > tol
    report.degenerate += int(np.count_nonzero(~ok))
    cos = np.abs(cosine_rows(rows, np.broadcast_to(x, rows.shape)))
    return ok, cos


def coupling_probe(router, experts, tokens, k: int, upstream=None, rng: Rng | None = None,
                   max_rows: int = MAX_EXPERT_ROWS, with_aux: bool = False) -> CouplingReport:
    """Per-token gradient direction check for one layer.

    Each token is run through forward and backward on its own, with the
    LM-style loss ``u . y`` (``upstream`` rows give ``u``; random if omitted).
    Records |cos| between x and the selected router rows and sampled
    W_up / W_gate rows, and counts unselected rows with any nonzero entry.
    With ``with_aux`` the batch's auxiliary balance loss is also probed:
    per-token contributions to every router row and the count of rows
    whose accumulated gradient is exactly zero.
    """
    tokens = np.asarray(tokens)
    rng = rng or Rng(0)
    if upstream is None:
        upstream = rng.child("upstream").normal(tokens.shape, 1.0, tokens.dtype)
    row_rng = rng.child("rows")
    report = CouplingReport()
    selections = []
    for t in range(tokens.shape[0]):
        x = tokens[t]
        _, tape = moe_forward(router, experts, x, k)
        g = moe_backward(tape, upstream[t])
        sel = set(int(i) for i in tape.decision.selected[0])
        selections.append(tape.decision.selected[0])
        for i, eg in enumerate(g.experts):
            if i not in sel:
                report.unselected_nonzero += int(
                    np.any(eg.w_gate != 0) or np.any(eg.w_up != 0) or np.any(eg.w_down != 0)
                )
                if g.w_r is not None:
                    report.unselected_nonzero += int(np.any(g.w_r[i] != 0))
                continue
            if g.w_r is not None:
                ok, cos = _abs_cos_rows(g.w_r[i : i + 1], x, report)
                if ok[0]:
                    report.router_cos.append((t, i, float(cos[0])))
            d_ff = eg.w_up.shape[0]
            rows = np.arange(d_ff) if d_ff <= max_rows else np.sort(
                row_rng.generator.choice(d_ff, max_rows, replace=False))
            for kind, mat in (("w_up", eg.w_up), ("w_gate", eg.w_gate)):
                ok, cos = _abs_cos_rows(mat[rows], x, report)
                for r, good, c in zip(rows, ok, cos):
                    if good:
                        report.row_cos.append((t, i, kind, int(r), float(c)))
    if with_aux:
        n = len(experts)
        z = tokens @ router.w_r.T
        stats = load_fractions(np.stack(selections), n, k)
        bg = aux_balance_loss(stats, z)
        acc = bg.row_grads(tokens)
        report.aux_zero_rows = int(np.count_nonzero(np.linalg.norm(acc, axis=1) == 0))
        for t in range(tokens.shape[0]):
            contrib = bg.token_row_grads(tokens, t)
            ok, cos = _abs_cos_rows(contrib, tokens[t], report)
            for j in range(n):
                report.aux_token_cos.append((t, j, float(cos[j]) if ok[j] else 0.0))
    return report


@dataclass
class CorrelationReport:
    pairs: np.ndarray  # (P, 2) normalized (score, activation)
    rho: float
    p_value: float
    n_pairs: int
    group_counts: dict
    insufficient: bool
    raw: list = field(default_factory=list)  # (layer, expert, score, activation)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "expert", "score", "activation", "norm_score", "norm_activation"])
            for (layer, e, s, a), (ns, na) in zip(self.raw, self.pairs):
                w.writerow([layer, e, f"{s:.8g}", f"{a:.8g}", f"{ns:.8g}", f"{na:.8g}"])


def zscore_groups(records, min_group: int = MIN_GROUP):
    """Z-normalize scores and activations within each (layer, expert) group.

    ``records`` is a list of ``(layer, expert, score, activation)``. Groups
    below ``min_group`` samples or with zero variance are dropped. Returns
    kept records, their normalized pairs, and per-group counts.
    """
    groups: dict = {}
    for idx, (layer, e, _, _) in enumerate(records):
        groups.setdefault((layer, e), []).append(idx)
    kept, pairs, counts = [], [], {}
    for key in sorted(groups):
        ids = groups[key]
        counts[key] = len(ids)
        if len(ids) < min_group:
            continue
        vals = np.array([[records[i][2], records[i][3]] for i in ids], dtype=np.float64)
        sd = vals.std(axis=0)
        if np.any(sd == 0):
            continue
        z = (vals - vals.mean(axis=0)) / sd
        kept.extend(records[i] for i in ids)
        pairs.append(z)
    arr = np.concatenate(pairs, axis=0) if pairs else np.zeros((0, 2))
    return kept, arr, counts


def correlation_from_records(records, permutations: int = 10_000, seed: int = 0,
                             min_group: int = MIN_GROUP, min_pairs: int = MIN_PAIRS) -> CorrelationReport:
    kept, pairs, counts = zscore_groups(records, min_group)
    n = pairs.shape[0]
    if n < min_pairs:
        res = spearman_rho(pairs[:, 0], pairs[:, 1], permutations, seed) if n >= 3 else SpearmanResult(
            float("nan"), float("nan"), True)
        return CorrelationReport(pairs, res.rho, res.p_value, n, counts, True, kept)
    res = spearman_rho(pairs[:, 0], pairs[:, 1], permutations, seed)
    return CorrelationReport(pairs, res.rho, res.p_value, n, counts, res.degenerate, kept)


def routed_records(layer_inputs, routers, experts_per_layer, k: int):
    """(layer, expert, raw score, mean gate activation) for every routed pair.

    The score is the raw router logit (bias-free cosine for centroid layers);
    the activation is the mean of SiLU(W_gate x) over the expert's gate neurons.
    """
    records = []
    for layer, (x, router, experts) in enumerate(zip(layer_inputs, routers, experts_per_layer)):
        dec = router.route(x, k)
        for i, e in enumerate(experts):
            rows = np.flatnonzero(np.any(dec.selected == i, axis=1))
            if rows.size == 0:
                continue
            pre = x[rows].astype(np.float64) @ e.w_gate.T.astype(np.float64)
            act = (pre / (1.0 + np.exp(-pre))).mean(axis=1)
            for r, a in zip(rows, act):
                records.append((layer, i, float(dec.logits[r, i]), float(a)))
    return records


def write_geometry_csv(report: GeometryReport, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mu", f"{report.mu:.8f}"])
        for row in report.matrix:
            w.writerow([f"{v:.8f}" for v in row])


def read_geometry_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    mu = float(rows[0][1])
    return mu, np.array([[float(v) for v in r] for r in rows[1:]])


def geometry_path(out_dir, layer: int) -> Path:
    return Path(out_dir) / f"geometry_layer{layer}.csv"
