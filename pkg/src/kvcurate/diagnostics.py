"""Attention diagnostics over row-stochastic attention slices."""

from __future__ import annotations

import csv
import io
import math
import statistics
from dataclasses import dataclass, field

import numpy as np

from .qkio import QkDump
from .sequence import KIND_ORDER, BlockKind, InterleavedSequence

ROW_TOL = 1e-4

# Features used for layer clustering, in column order.
CLUSTER_FEATURES = ("text_ratio", "vit_ratio", "vae_ratio", "special_ratio", "norm_entropy", "top10_coverage")


class DiagnosticsError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AttentionSlice:
    """Attention of current rows over context columns.

    ``columns`` gives the global token index of each column (defaults to
    ``0..n-1``). ``head`` is ``None`` for head-averaged weights.
    """

    weights: np.ndarray
    layer: int = 0
    head: int | None = None
    step: int = 0
    columns: np.ndarray | None = None

    def __post_init__(self):
        w = np.atleast_2d(np.asarray(self.weights, dtype=np.float64))
        object.__setattr__(self, "weights", w)
        if self.columns is None:
            object.__setattr__(self, "columns", np.arange(w.shape[1], dtype=np.int64))
        elif len(self.columns) != w.shape[1]:
            raise DiagnosticsError(f"{len(self.columns)} column labels for {w.shape[1]} columns")

    def validate(self, tol: float = ROW_TOL) -> None:
        if (self.weights < 0).any():
            raise DiagnosticsError("negative attention weight")
        dev = np.abs(self.weights.sum(axis=1) - 1.0).max()
        if dev > tol:
            raise DiagnosticsError(f"rows deviate from sum 1 by {dev:.3g}")


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def slice_from_dump(dump: QkDump, layer: int, query_rows, columns, step: int = 0,
                    head: int | None = None) -> AttentionSlice:
    """Post-softmax attention at scale 1/sqrt(d), head-averaged unless ``head`` is given."""
    query_rows = np.asarray(query_rows)
    columns = np.asarray(columns, dtype=np.int64)
    d = dump.head_dim
    heads = range(dump.heads) if head is None else [head]
    acc = np.zeros((len(query_rows), len(columns)))
    for h in heads:
        q = dump.queries[layer, query_rows, h].astype(np.float64)
        k = dump.keys[layer, columns, h].astype(np.float64)
        acc += softmax_rows(q @ k.T / math.sqrt(d))
    return AttentionSlice(acc / len(heads), layer, head, step, columns)


def _row_entropy(w: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(w > 0, w * np.log(np.where(w > 0, w, 1.0)), 0.0)
    return -t.sum(axis=1)


def attention_entropy(sl: AttentionSlice, normalized: bool = False) -> float:
    """Mean natural-log entropy over rows; ``normalized`` divides by ln(n)."""
    sl.validate()
    h = float(_row_entropy(sl.weights).mean())
    if normalized:
        n = sl.weights.shape[1]
        return h / math.log(n) if n > 1 else 0.0
    return h


def _top_count(n: int, percent: float) -> int:
    return max(1, math.ceil(percent * n / 100.0 - 1e-9))


def gini(weights: np.ndarray) -> float:
    """Gini coefficient of one nonnegative vector (sorted-weights form)."""
    x = np.sort(np.asarray(weights, dtype=np.float64))
    n = x.size
    total = math.fsum(x)
    if n == 0 or total == 0:
        return 0.0
    coef = 2 * np.arange(1, n + 1) - n - 1
    return math.fsum(coef * x) / (n * total)


@dataclass(frozen=True)
class Concentration:
    percents: tuple[float, ...]
    coverage: tuple[float, ...]
    gini: float


def coverage_and_gini(sl: AttentionSlice, percents=(1, 5, 10, 20, 50, 100)) -> Concentration:
    """Cumulative mass of the top-p% columns and Gini, each averaged over rows."""
    percents = tuple(float(p) for p in percents)
    if any(not 0 < p <= 100 for p in percents):
        raise DiagnosticsError("percents must lie in (0, 100]")
    w = sl.weights
    n = w.shape[1]
    per_row = []
    ginis = []
    for row in w:
        desc = np.sort(row)[::-1]
        per_row.append([math.fsum(desc[:_top_count(n, p)]) for p in percents])
        ginis.append(gini(row))
    # exact rational means, so identical rows average to exactly their common value
    cov = tuple(float(statistics.mean(col)) for col in zip(*per_row))
    return Concentration(percents, cov, float(statistics.mean(ginis)))


def coverage_curve(sl: AttentionSlice) -> np.ndarray:
    """Row-averaged cumulative mass of the sorted weights (length n, ends at 1)."""
    desc = -np.sort(-sl.weights, axis=1)
    return np.cumsum(desc, axis=1).mean(axis=0)


def key_reference_mass(sl: AttentionSlice, seq: InterleavedSequence, reference_turn: int) -> float | None:
    """Share of historical-image attention that lands on the reference turn's VAE tokens.

    Returns ``None`` when no attention reaches historical images.
    """
    ref = seq.turn(reference_turn).vae_block
    if ref is None:
        raise DiagnosticsError(f"reference turn {reference_turn} has no VAE block")
    hist_vae = seq.tokens_of(seq.turn_indices, BlockKind.VAE)
    cols = sl.columns
    mass = sl.weights.sum(axis=0)
    on_hist = np.isin(cols, hist_vae)
    total = mass[on_hist].sum()
    if total <= 0:
        return None
    on_ref = (cols >= ref.start) & (cols < ref.stop)
    return float(mass[on_ref].sum() / total)


def _kind_fractions(sl: AttentionSlice, seq: InterleavedSequence) -> dict[str, float]:
    if sl.columns.max(initial=-1) >= seq.total_tokens:
        raise DiagnosticsError("slice columns extend beyond the sequence")
    kinds = seq.kind_array()[sl.columns]
    mass = sl.weights.sum(axis=0)
    total = mass.sum()
    return {k.value: float(mass[kinds == i].sum() / total) for i, k in enumerate(KIND_ORDER)}


def modality_ratios(slices, seq: InterleavedSequence) -> dict[int, dict[str, float]]:
    """Attention mass by block kind, normalized per layer."""
    if isinstance(slices, AttentionSlice):
        slices = [slices]
    out: dict[int, dict[str, float]] = {}
    by_layer: dict[int, list[AttentionSlice]] = {}
    for s in slices:
        by_layer.setdefault(s.layer, []).append(s)
    for layer, group in sorted(by_layer.items()):
        fr = [_kind_fractions(s, seq) for s in group]
        out[layer] = {k.value: float(np.mean([f[k.value] for f in fr])) for k in KIND_ORDER}
    return out


def hist_vs_current(slices, seq: InterleavedSequence) -> dict[int, dict[str, float]]:
    """Per refinement step, the share of attention on history vs current-turn tokens."""
    out = {}
    for s in sorted(slices, key=lambda s: s.step):
        if s.columns.max(initial=-1) >= seq.total_tokens:
            raise DiagnosticsError("slice columns extend beyond the sequence")
        mass = s.weights.sum(axis=0)
        hist = mass[s.columns < seq.history_end].sum()
        total = mass.sum()
        out[s.step] = {"history": float(hist / total), "current": float(1 - hist / total)}
    return out


def text_vae_correlation(ratios: dict[int, dict[str, float]]) -> float | None:
    """Pearson r between per-layer text and VAE ratios; ``None`` under zero variance."""
    if len(ratios) < 3:
        raise DiagnosticsError("need at least 3 layers")
    layers = sorted(ratios)
    t = np.array([ratios[l]["text"] for l in layers])
    v = np.array([ratios[l]["vae"] for l in layers])
    t, v = t - t.mean(), v - v.mean()
    den = math.sqrt(float(t @ t) * float(v @ v))
    if den < 1e-15:
        return None
    return max(-1.0, min(1.0, float(t @ v) / den))


# -- Ward clustering ---------------------------------------------------------

def ward_linkage(x: np.ndarray) -> list[tuple[int, int, float, int]]:
    """Agglomerative Ward merges via Lance-Williams updates.

    Returns ``(a, b, distance, size)`` per merge in scipy's convention: leaves
    are ``0..n-1``, the i-th merge creates cluster ``n+i``, and ``distance`` is
    the Ward distance sqrt(2 * increase in within-cluster SS). Ties merge the
    pair with the lowest (min member, max member) leaf indices.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    active = {i: (i, 1, i) for i in range(n)}  # slot -> (cluster id, size, min leaf)
    d = dist.copy()
    np.fill_diagonal(d, np.inf)
    merges = []
    for step in range(n - 1):
        best = None
        slots = sorted(active)
        for ai, a in enumerate(slots):
            for b in slots[ai + 1:]:
                key = (d[a, b], min(active[a][2], active[b][2]), max(active[a][2], active[b][2]))
                if best is None or key < best[0]:
                    best = (key, a, b)
        (dab, _, _), a, b = best
        ida, na, la = active[a]
        idb, nb, lb = active[b]
        for c in slots:
            if c in (a, b):
                continue
            nc = active[c][1]
            tot = na + nb + nc
            new = math.sqrt(max(0.0, ((na + nc) * d[a, c] ** 2 + (nb + nc) * d[b, c] ** 2
                                      - nc * dab ** 2) / tot))
            d[a, c] = d[c, a] = new
        d[b, :] = d[:, b] = np.inf
        del active[b]
        active[a] = (n + step, na + nb, min(la, lb))
        merges.append((min(ida, idb), max(ida, idb), float(dab), na + nb))
    return merges


def cut_tree(merges, n: int, k: int) -> np.ndarray:
    """Flat labels 1..k from the first ``n-k`` merges, numbered by first appearance."""
    parent = list(range(n + len(merges)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for step, (a, b, _, _) in enumerate(merges[:n - k]):
        new = n + step
        parent[find(a)] = new
        parent[find(b)] = new
    roots = [find(i) for i in range(n)]
    labels, seen = np.zeros(n, dtype=np.int64), {}
    for i, r in enumerate(roots):
        labels[i] = seen.setdefault(r, len(seen) + 1)
    return labels


@dataclass(frozen=True)
class LayerClusters:
    assignments: tuple[int, ...]
    contiguity: float
    features: tuple[str, ...] = CLUSTER_FEATURES


def zscore(features: np.ndarray) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    sd = f.std(axis=0)
    sd[sd == 0] = 1.0
    return (f - f.mean(axis=0)) / sd


def layer_cluster(features: np.ndarray, k: int = 5) -> LayerClusters:
    """Ward clustering of z-scored per-layer feature vectors cut at ``k`` clusters."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n < k:
        raise DiagnosticsError(f"need at least {k} layers, got {n}")
    labels = cut_tree(ward_linkage(zscore(features)), n, k)
    contig = float(np.mean(labels[1:] == labels[:-1])) if n > 1 else 1.0
    return LayerClusters(tuple(int(v) for v in labels), contig)


def layer_features(slices_by_layer: dict[int, AttentionSlice], seq: InterleavedSequence) -> np.ndarray:
    rows = []
    for layer in sorted(slices_by_layer):
        s = slices_by_layer[layer]
        fr = _kind_fractions(s, seq)
        rows.append([fr["text"], fr["vit"], fr["vae"], fr["special"],
                     attention_entropy(s, normalized=True), coverage_and_gini(s, (10,)).coverage[0]])
    return np.array(rows)


# -- report ------------------------------------------------------------------

@dataclass
class DiagnosticsReport:
    entropy_by_context_len: list[dict] = field(default_factory=list)
    coverage_curve: list[dict] = field(default_factory=list)
    gini: dict[int, float] = field(default_factory=dict)
    modality_ratios: dict[int, dict[str, float]] = field(default_factory=dict)
    key_reference_mass: list[dict] = field(default_factory=list)
    hist_vs_current: dict[int, dict[str, float]] = field(default_factory=dict)
    cluster_assignments: list[int] = field(default_factory=list)
    cluster_contiguity: float | None = None
    text_vae_correlation: float | None = None
    metadata: dict = field(default_factory=lambda: {"cluster_features": list(CLUSTER_FEATURES),
                                                    "entropy_log": "natural"})

    def to_json(self) -> dict:
        return {
            "entropy_by_context_len": self.entropy_by_context_len,
            "coverage_curve": self.coverage_curve,
            "gini": {str(k): v for k, v in self.gini.items()},
            "modality_ratios": {str(k): v for k, v in self.modality_ratios.items()},
            "key_reference_mass": self.key_reference_mass,
            "hist_vs_current": {str(k): v for k, v in self.hist_vs_current.items()},
            "cluster_assignments": self.cluster_assignments,
            "cluster_contiguity": self.cluster_contiguity,
            "text_vae_correlation": self.text_vae_correlation,
            "metadata": self.metadata,
        }

    def figure_csvs(self) -> dict[str, str]:
        """One flat CSV per figure analogue."""
        def table(header, rows):
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
            return buf.getvalue()

        fmt = lambda v: "" if v is None else f"{v:.10g}"  # noqa: E731
        return {
            "fig4_entropy.csv": table(
                ("images", "context_tokens", "entropy"),
                [(r["images"], r["context_tokens"], fmt(r["entropy"])) for r in self.entropy_by_context_len]),
            "fig5_coverage.csv": table(
                ("layer", "percent", "coverage"),
                [(r["layer"], fmt(r["percent"]), fmt(r["coverage"])) for r in self.coverage_curve]),
            "fig6_key_reference.csv": table(
                ("distractors", "key_reference_mass"),
                [(r["distractors"], fmt(r["mass"])) for r in self.key_reference_mass]),
            "fig7_modality.csv": table(
                ("layer",) + tuple(k.value for k in KIND_ORDER),
                [(l,) + tuple(fmt(r[k.value]) for k in KIND_ORDER) for l, r in self.modality_ratios.items()]),
            "fig8_clusters.csv": table(
                ("layer", "cluster"), list(enumerate(self.cluster_assignments))),
            "fig13_text_vae.csv": table(
                ("layer", "text", "vae", "r"),
                [(l, fmt(r["text"]), fmt(r["vae"]), fmt(self.text_vae_correlation))
                 for l, r in self.modality_ratios.items()]),
            "fig14_hist_current.csv": table(
                ("step", "history", "current"),
                [(s, fmt(r["history"]), fmt(r["current"])) for s, r in self.hist_vs_current.items()]),
        }


def diagnose(dump: QkDump, seq: InterleavedSequence, reference_turn: int | None = None,
             percents=(1, 5, 10, 20, 50, 100)) -> DiagnosticsReport:
    """Run every diagnostic on a single probing dump.

    Slices use the current image's queries over history plus current tokens.
    The entropy series truncates history to its first j turns; key-reference
    mass treats turns after the reference as its distractors.
    """
    rep = DiagnosticsReport()
    rows = seq.current_vae.indices
    cur_cols = np.arange(seq.history_end, seq.total_tokens)
    hist_cols = np.arange(seq.history_end)
    full_cols = np.arange(seq.total_tokens)
    slices = {layer: slice_from_dump(dump, layer, rows, full_cols) for layer in range(dump.layers)}
    last = dump.layers - 1

    for layer, s in slices.items():
        conc = coverage_and_gini(s, percents)
        rep.coverage_curve += [{"layer": layer, "percent": p, "coverage": c}
                               for p, c in zip(conc.percents, conc.coverage)]
        rep.gini[layer] = conc.gini
    rep.modality_ratios = modality_ratios(list(slices.values()), seq)
    rep.hist_vs_current = hist_vs_current([slices[last]], seq)

    if seq.m:
        hist_ratio = {layer: _kind_fractions(slice_from_dump(dump, layer, rows, hist_cols), seq)
                      for layer in range(dump.layers)}
        if dump.layers >= 3:
            rep.text_vae_correlation = text_vae_correlation(hist_ratio)
    for j in range(seq.m + 1):
        end = seq.turns[j].start if j < seq.m else seq.history_end
        cols = np.concatenate([np.arange(end), cur_cols])
        s = slice_from_dump(dump, last, rows, cols)
        rep.entropy_by_context_len.append({"images": j, "context_tokens": int(cols.size),
                                           "entropy": attention_entropy(s)})
    if reference_turn is not None:
        pos = seq.turn_indices.index(reference_turn)
        for n_dis in range(seq.m - pos):
            end = seq.turns[pos + n_dis + 1].start if pos + n_dis + 1 < seq.m else seq.history_end
            s = slice_from_dump(dump, last, rows, np.arange(end))
            rep.key_reference_mass.append({"distractors": n_dis,
                                           "mass": key_reference_mass(s, seq, reference_turn)})
    if dump.layers >= 5:
        lc = layer_cluster(layer_features(slices, seq))
        rep.cluster_assignments = list(lc.assignments)
        rep.cluster_contiguity = lc.contiguity
    return rep
