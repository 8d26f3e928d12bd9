"""One-shot relevance probing of historical blocks and dual-depth turn selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

from .config import MeanVae, QueryAnchor, RunConfig, SpecialToken
from .qkio import QkDump
from .sequence import Block, BlockKind, InterleavedSequence

FIRST_TURN = 1


class ProbeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class MeanQuery:
    vectors: np.ndarray  # [H, d] float64
    source_layer: int
    token_count: int


@dataclass(frozen=True)
class RelevanceReport:
    layer: int
    target_kind: BlockKind
    scores: Mapping[int, float]
    ranking: tuple[int, ...]
    mode: str = "pre_softmax"
    warnings: tuple[str, ...] = ()

    @classmethod
    def from_scores(cls, layer, kind, scores: dict[int, float], mode="pre_softmax", warnings=()):
        ranking = tuple(sorted(scores, key=lambda t: (-scores[t], t)))
        return cls(layer, BlockKind.parse(kind), MappingProxyType(dict(sorted(scores.items()))),
                   ranking, mode, tuple(warnings))

    def to_json(self) -> dict:
        return {
            "layer": self.layer,
            "kind": self.target_kind.value,
            "mode": self.mode,
            "scores": [{"turn": t, "score": float(s)} for t, s in self.scores.items()],
            "ranking": list(self.ranking),
            "warnings": list(self.warnings),
        }


@dataclass(frozen=True, eq=False)
class CurationPlan:
    """Fixed per-layer visibility over history tokens.

    ``per_layer_visible`` maps every layer to a read-only ascending index array.
    ``per_layer_compressed`` lists non-selected blocks that survive in
    compressed form (empty under the default drop handling).
    """

    variant: str
    grd_turns: frozenset[int]
    syn_turns: frozenset[int]
    ell_syn: int
    per_layer_visible: Mapping[int, np.ndarray]
    per_layer_compressed: Mapping[int, tuple[Block, ...]] = field(
        default_factory=lambda: MappingProxyType({}))
    compress: tuple[int, str] | None = None
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        frozen = {}
        for layer, idx in self.per_layer_visible.items():
            arr = np.array(idx, dtype=np.int64)
            arr.setflags(write=False)
            frozen[int(layer)] = arr
        object.__setattr__(self, "per_layer_visible", MappingProxyType(frozen))
        object.__setattr__(self, "per_layer_compressed",
                           MappingProxyType({int(k): tuple(v) for k, v in self.per_layer_compressed.items()}))
        object.__setattr__(self, "grd_turns", frozenset(self.grd_turns))
        object.__setattr__(self, "syn_turns", frozenset(self.syn_turns))

    @property
    def layers(self) -> int:
        return len(self.per_layer_visible)

    def visible(self, layer: int) -> np.ndarray:
        return self.per_layer_visible[layer]

    def same_visibility(self, other: "CurationPlan") -> bool:
        if set(self.per_layer_visible) != set(other.per_layer_visible):
            return False
        return all(np.array_equal(v, other.per_layer_visible[k]) for k, v in self.per_layer_visible.items()) \
            and self.per_layer_compressed == other.per_layer_compressed

    def to_json(self, seq: InterleavedSequence) -> dict:
        turn_of = seq.turn_array()
        kind_of = seq.kind_array()
        from .sequence import KIND_ORDER

        def summarize(layer):
            idx = self.per_layer_visible[layer]
            sel: dict[tuple[int, int], int] = {}
            for t, k in zip(turn_of[idx].tolist(), kind_of[idx].tolist()):
                sel[(t, k)] = sel.get((t, k), 0) + 1
            out = [{"turn": t, "kind": KIND_ORDER[k].value, "count": c} for (t, k), c in sorted(sel.items())]
            for b in self.per_layer_compressed.get(layer, ()):
                out.append({"turn": b.turn, "kind": b.kind.value, "count": len(b), "compressed": True})
            return out

        groups = []
        for layer in sorted(self.per_layer_visible):
            s = summarize(layer)
            if groups and groups[-1]["blocks"] == s:
                groups[-1]["last"] = layer
            else:
                groups.append({"first": layer, "last": layer, "blocks": s})
        return {
            "variant": self.variant,
            "grd_turns": sorted(self.grd_turns),
            "syn_turns": sorted(self.syn_turns),
            "ell_syn": self.ell_syn,
            "per_layer_visible": groups,
            "compress": None if self.compress is None else {"rate": self.compress[0], "interp": self.compress[1]},
            "warnings": list(self.warnings),
        }


def _check_layer(dump: QkDump, layer: int) -> None:
    if not 0 <= layer < dump.layers:
        raise ProbeError(f"layer {layer} outside dump with {dump.layers} layers")


def anchor_index(seq: InterleavedSequence, anchor: SpecialToken) -> int:
    if anchor.index is not None:
        idx = anchor.index
    else:
        before = [b for b in seq.current.special_blocks if b.stop <= seq.current_vae.start]
        if not before:
            raise ProbeError("current turn has no special block before its image to anchor on")
        idx = before[-1].start
    for b in seq.blocks:
        if b.start <= idx < b.stop:
            if b.kind is not BlockKind.SPECIAL:
                raise ProbeError(f"anchor token {idx} lies in a {b.kind.value} block, not a special block")
            return idx
    raise ProbeError(f"anchor token {idx} outside the sequence")


def mean_query(dump: QkDump, seq: InterleavedSequence, layer: int,
               anchor: QueryAnchor = MeanVae()) -> MeanQuery:
    """Per-head mean of the current image's query rows (or one anchor row)."""
    _check_layer(dump, layer)
    if isinstance(anchor, SpecialToken):
        idx = anchor_index(seq, anchor)
        return MeanQuery(dump.queries[layer, idx].astype(np.float64), layer, 1)
    cur = seq.current_vae
    if cur is None or len(cur) == 0:
        raise ProbeError("current image has no VAE tokens")
    q = dump.queries[layer, cur.start:cur.stop].astype(np.float64)
    return MeanQuery(q.sum(axis=0) / len(cur), layer, len(cur))


def token_similarity(dump: QkDump, mq: MeanQuery, start: int, stop: int) -> np.ndarray:
    """Head-averaged scaled similarity of each key in ``[start, stop)`` to the mean query."""
    H, d = dump.heads, dump.head_dim
    k = dump.keys[mq.source_layer, start:stop].astype(np.float64)
    per_head = np.einsum("nhd,hd->nh", k, mq.vectors)
    return per_head.sum(axis=1) / (H * math.sqrt(d))


def relevance_score(dump: QkDump, seq: InterleavedSequence, mq: MeanQuery, block: Block,
                    layer: int) -> float:
    if layer != mq.source_layer:
        raise ProbeError(f"mean query from layer {mq.source_layer} used at layer {layer}")
    if len(block) == 0:
        raise ProbeError("empty block")
    if block.stop > seq.history_end:
        raise ProbeError(f"block [{block.start}, {block.stop}) is not historical")
    return float(token_similarity(dump, mq, block.start, block.stop).sum() / len(block))


def relevance_report(dump: QkDump, seq: InterleavedSequence, kind: BlockKind | str, layer: int,
                     anchor: QueryAnchor = MeanVae(), mq: MeanQuery | None = None) -> RelevanceReport:
    kind = BlockKind.parse(kind)
    if mq is None:
        mq = mean_query(dump, seq, layer, anchor)
    scores, warnings = {}, []
    for turn in seq.turns:
        b = turn.block(kind)
        if b is None:
            warnings.append(f"turn {turn.index} has no {kind.value} block; skipped")
            continue
        scores[turn.index] = relevance_score(dump, seq, mq, b, layer)
    return RelevanceReport.from_scores(layer, kind, scores, "pre_softmax", warnings)


def history_attention(dump: QkDump, seq: InterleavedSequence, layer: int,
                      query_rows: np.ndarray | None = None) -> np.ndarray:
    """Post-softmax weight on each history token, averaged over heads and query rows."""
    _check_layer(dump, layer)
    n_hist = seq.history_end
    if n_hist == 0:
        raise ProbeError("empty history")
    if query_rows is None:
        query_rows = seq.current_vae.indices
    d = dump.head_dim
    w = np.zeros(n_hist, dtype=np.float64)
    for h in range(dump.heads):
        q = dump.queries[layer, query_rows, h].astype(np.float64)
        k = dump.keys[layer, :n_hist, h].astype(np.float64)
        logits = q @ k.T / math.sqrt(d)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        w += p.sum(axis=0)
    return w / (dump.heads * len(query_rows))


def relevance_score_post_softmax(dump: QkDump, seq: InterleavedSequence, block: Block, layer: int,
                                 weights: np.ndarray | None = None) -> float:
    """Mean attention weight per block token, scaled by the history length.

    A block receiving exactly uniform attention scores 1; a block that is the
    whole history scores 1 regardless of content.
    """
    if len(block) == 0:
        raise ProbeError("empty block")
    if block.stop > seq.history_end:
        raise ProbeError(f"block [{block.start}, {block.stop}) is not historical")
    if weights is None:
        weights = history_attention(dump, seq, layer)
    return float(weights[block.start:block.stop].mean() * len(weights))


def relevance_report_post_softmax(dump: QkDump, seq: InterleavedSequence, kind: BlockKind | str,
                                  layer: int) -> RelevanceReport:
    kind = BlockKind.parse(kind)
    weights = history_attention(dump, seq, layer)
    scores, warnings = {}, []
    for turn in seq.turns:
        b = turn.block(kind)
        if b is None:
            warnings.append(f"turn {turn.index} has no {kind.value} block; skipped")
            continue
        scores[turn.index] = relevance_score_post_softmax(dump, seq, b, layer, weights)
    return RelevanceReport.from_scores(layer, kind, scores, "post_softmax", warnings)


def score_turns(dump: QkDump, seq: InterleavedSequence, kind: BlockKind | str, layer: int,
                cfg: RunConfig) -> RelevanceReport:
    if cfg.score_mode == "post_softmax":
        return relevance_report_post_softmax(dump, seq, kind, layer)
    return relevance_report(dump, seq, kind, layer, cfg.query_anchor)


def select_turns(report: RelevanceReport, k: int) -> frozenset[int]:
    """Top-``k`` turns by score; ties go to the lower turn index."""
    if k < 1:
        raise ProbeError("k must be >= 1")
    return frozenset(report.ranking[:k])


def with_first_turn(seq: InterleavedSequence, turns: Iterable[int]) -> frozenset[int]:
    turns = set(turns)
    if FIRST_TURN in seq.turn_indices:
        turns.add(FIRST_TURN)
    return frozenset(turns)


def split_visibility(seq: InterleavedSequence, layers: int, split: int, grd_turns, syn_turns,
                     kinds_early=(BlockKind.TEXT,), kinds_late=(BlockKind.VAE,)) -> dict[int, np.ndarray]:
    early = np.sort(np.concatenate([seq.tokens_of(grd_turns, k) for k in kinds_early]))
    late = np.sort(np.concatenate([seq.tokens_of(syn_turns, k) for k in kinds_late]))
    return {layer: (early if layer < split else late) for layer in range(layers)}


def build_plan(dump: QkDump, seq: InterleavedSequence, cfg: RunConfig) -> CurationPlan:
    """Dual-depth plan: text relevance at ``ell_grd``, image relevance at ``ell_syn``."""
    _check_layer(dump, cfg.ell_grd)
    _check_layer(dump, cfg.ell_syn)
    text = score_turns(dump, seq, BlockKind.TEXT, cfg.ell_grd, cfg)
    vae = score_turns(dump, seq, BlockKind.VAE, cfg.ell_syn, cfg)
    grd = with_first_turn(seq, select_turns(text, cfg.k_grd))
    syn = with_first_turn(seq, select_turns(vae, cfg.k_img))
    visible = split_visibility(seq, dump.layers, cfg.split_layer, grd, syn)
    return CurationPlan("unilonggen", grd, syn, cfg.split_layer, visible,
                        warnings=text.warnings + vae.warnings)
