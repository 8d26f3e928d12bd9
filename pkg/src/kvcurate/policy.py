"""Context-curation policies: the dual-probe plan plus the baselines it is compared against.

Every policy returns a :class:`~kvcurate.probe.CurationPlan`, so the cache,
the simulator and the ablation driver can treat them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import probe
from .config import (Compress, ConfigError, DenseKv, GroupedToken, PolicyVariant, RunConfig,
                     SemanticOracle, SingleProbe, SlidingWindow, TextBlockMatch, TokenLevel,
                     UniLongGen, variant_name)
from .probe import CurationPlan, RelevanceReport, with_first_turn
from .qkio import QkDump
from .sequence import Block, BlockKind, InterleavedSequence


class PolicyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CompressedBlock:
    source_block: Block
    rate: int
    interp: str
    keys: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return self.keys.shape[0]


def _all_history_visible(seq: InterleavedSequence, layers: int) -> dict[int, np.ndarray]:
    idx = np.arange(seq.history_end, dtype=np.int64)
    return {layer: idx for layer in range(layers)}


def dense_plan(seq: InterleavedSequence, layers: int) -> CurationPlan:
    turns = frozenset(seq.turn_indices)
    return CurationPlan("dense_kv", turns, turns, 0, _all_history_visible(seq, layers))


def _uniform_plan(variant: str, seq: InterleavedSequence, layers: int, turns) -> CurationPlan:
    turns = frozenset(turns)
    idx = np.sort(np.concatenate([seq.tokens_of(turns, BlockKind.TEXT),
                                  seq.tokens_of(turns, BlockKind.VAE)]))
    return CurationPlan(variant, turns, turns, 0, {layer: idx for layer in range(layers)})


def image_turns(seq: InterleavedSequence) -> list[int]:
    return [t.index for t in seq.turns if t.vae_block is not None]


def sliding_window_plan(seq: InterleavedSequence, n: int, layers: int = 1) -> CurationPlan:
    """Image turn 1 plus the last ``n`` image turns, text of kept turns included, at every layer."""
    if n < 1:
        raise PolicyError("n must be >= 1")
    imgs = image_turns(seq)
    kept = set(imgs[-n:])
    if imgs:
        kept.add(imgs[0])
    return _uniform_plan("sliding_window", seq, layers, kept)


def single_probe_plan(dump: QkDump, seq: InterleavedSequence, cfg: RunConfig,
                      kind: BlockKind | str, layer: int) -> CurationPlan:
    """One relevance signal selects whole turns; all layers see their text and image."""
    report = probe.score_turns(dump, seq, kind, layer, cfg)
    kept = with_first_turn(seq, probe.select_turns(report, cfg.k_img))
    plan = _uniform_plan("single_probe", seq, dump.layers, kept)
    return CurationPlan(plan.variant, plan.grd_turns, plan.syn_turns, 0, plan.per_layer_visible,
                        warnings=report.warnings)


def _text_layers(dump, seq, cfg) -> tuple[frozenset[int], tuple[str, ...]]:
    text = probe.score_turns(dump, seq, BlockKind.TEXT, cfg.ell_grd, cfg)
    return with_first_turn(seq, probe.select_turns(text, cfg.k_grd)), text.warnings


def tokens_per_image(seq: InterleavedSequence) -> int:
    sizes = [len(b) for b in seq.history_blocks(BlockKind.VAE)]
    return int(round(sum(sizes) / len(sizes))) if sizes else 0


def vae_token_scores(dump: QkDump, seq: InterleavedSequence, cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """(token indices, head-averaged pre-softmax similarity) for every history VAE token."""
    mq = probe.mean_query(dump, seq, cfg.ell_syn, cfg.query_anchor)
    idx, scores = [], []
    for b in seq.history_blocks(BlockKind.VAE):
        idx.append(b.indices)
        scores.append(probe.token_similarity(dump, mq, b.start, b.stop))
    if not idx:
        return np.empty(0, np.int64), np.empty(0)
    return np.concatenate(idx), np.concatenate(scores)


def _token_split_plan(variant, dump, seq, cfg, kept_vae) -> CurationPlan:
    grd, warns = _text_layers(dump, seq, cfg)
    early = seq.tokens_of(grd, BlockKind.TEXT)
    late = np.sort(np.asarray(kept_vae, dtype=np.int64))
    turn_of = seq.turn_array()
    syn = frozenset(int(t) for t in np.unique(turn_of[late])) if late.size else frozenset()
    visible = {layer: (early if layer < cfg.split_layer else late) for layer in range(dump.layers)}
    return CurationPlan(variant, grd, syn, cfg.split_layer, visible, warnings=warns)


def token_level_plan(dump: QkDump, seq: InterleavedSequence, cfg: RunConfig, budget: int) -> CurationPlan:
    """Keep the individually highest-scoring history VAE tokens, ``budget`` images' worth."""
    idx, scores = vae_token_scores(dump, seq, cfg)
    n_keep = min(budget * tokens_per_image(seq), idx.size)
    order = np.lexsort((idx, -scores))
    return _token_split_plan("token_level", dump, seq, cfg, idx[order[:n_keep]])


def grouped_token_plan(dump: QkDump, seq: InterleavedSequence, cfg: RunConfig, group_size: int,
                       budget: int) -> CurationPlan:
    """Rank contiguous token groups (per VAE block, short tail allowed) by mean score.

    Groups are taken in rank order; a group that would exceed the budget is
    skipped and smaller lower-ranked groups may still fill the remainder.
    """
    if group_size < 1:
        raise PolicyError("group_size must be >= 1")
    mq = probe.mean_query(dump, seq, cfg.ell_syn, cfg.query_anchor)
    groups = []  # (score, start, stop)
    for b in seq.history_blocks(BlockKind.VAE):
        s = probe.token_similarity(dump, mq, b.start, b.stop)
        for lo in range(0, len(b), group_size):
            hi = min(lo + group_size, len(b))
            groups.append((float(s[lo:hi].sum() / (hi - lo)), b.start + lo, b.start + hi))
    groups.sort(key=lambda g: (-g[0], g[1]))
    left = budget * tokens_per_image(seq)
    kept = []
    for _, lo, hi in groups:
        if hi - lo <= left:
            kept.append(np.arange(lo, hi))
            left -= hi - lo
    kept_idx = np.concatenate(kept) if kept else np.empty(0, np.int64)
    return _token_split_plan("grouped_token", dump, seq, cfg, kept_idx)


def semantic_oracle_plan(seq: InterleavedSequence, labels: dict[int, int], k: int,
                         dump: QkDump | None = None, cfg: RunConfig | None = None,
                         layers: int | None = None) -> CurationPlan:
    """Keep turn 1 plus the ``k`` best-ranked turns by external labels (rank 1 = most relevant).

    Early layers use the probe's text selection when a dump is given,
    otherwise the oracle's own turns.
    """
    ranks = list(labels.values())
    if len(set(ranks)) != len(ranks):
        raise ConfigError("semantic oracle labels contain duplicate ranks")
    missing = [t for t in image_turns(seq) if t not in labels]
    if missing:
        raise ConfigError(f"semantic oracle labels missing for turns {missing}")
    ordered = sorted((t for t in labels if t in seq.turn_indices), key=lambda t: (labels[t], t))
    syn = with_first_turn(seq, ordered[:k])
    warns: tuple[str, ...] = ()
    if dump is not None and cfg is not None:
        grd, warns = _text_layers(dump, seq, cfg)
        layers, split = dump.layers, cfg.split_layer
    else:
        grd = syn
        layers = layers or 1
        split = cfg.split_layer if cfg is not None else layers
    visible = probe.split_visibility(seq, layers, split, grd, syn)
    return CurationPlan("semantic_oracle", grd, syn, split, visible, warnings=warns)


def _pooled_keys(dump: QkDump, layer: int, block: Block) -> np.ndarray:
    k = dump.keys[layer, block.start:block.stop].astype(np.float64)
    return k.reshape(len(block), -1).mean(axis=0)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(a @ b / (na * nb))


def text_block_match_report(dump: QkDump, seq: InterleavedSequence, layer: int) -> RelevanceReport:
    cur = seq.current.text_block
    if cur is None:
        raise PolicyError("current turn has no text block to match against")
    ref = _pooled_keys(dump, layer, cur)
    scores, warns = {}, []
    for turn in seq.turns:
        if turn.text_block is None:
            warns.append(f"turn {turn.index} has no text block; excluded")
            continue
        scores[turn.index] = cosine(ref, _pooled_keys(dump, layer, turn.text_block))
    return RelevanceReport.from_scores(layer, BlockKind.TEXT, scores, "cosine", warns)


def text_block_match_plan(dump: QkDump, seq: InterleavedSequence, k: int, layer: int,
                          split: int | None = None) -> CurationPlan:
    """Rank history turns by key-space cosine between the current and historical text blocks."""
    report = text_block_match_report(dump, seq, layer)
    kept = with_first_turn(seq, probe.select_turns(report, k))
    split = dump.layers if split is None else split
    visible = probe.split_visibility(seq, dump.layers, split, kept, kept)
    return CurationPlan("text_block_match", kept, kept, split, visible, warnings=report.warnings)


# -- discard handling --------------------------------------------------------

def _lerp_positions(n: int, rate: int) -> np.ndarray:
    m = math.ceil(n / rate)
    return (np.arange(m) + 0.5) * (n - 1) / m


def compress_block(keys: np.ndarray, values: np.ndarray, rate: int, interp: str,
                   source_block: Block | None = None) -> CompressedBlock:
    """Downsample along the token axis (axis 0), independently for every other coordinate."""
    keys = np.asarray(keys)
    values = np.asarray(values)
    n = keys.shape[0]
    if n < 1:
        raise PolicyError("cannot compress an empty block")
    if rate < 1:
        raise PolicyError("rate must be positive")
    m = math.ceil(n / rate)

    def pool(x, fn):
        return np.stack([fn(x[j * rate:(j + 1) * rate], axis=0) for j in range(m)])

    def lerp(x):
        pos = _lerp_positions(n, rate)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n - 1)
        frac = (pos - lo).reshape((-1,) + (1,) * (x.ndim - 1))
        return x[lo] * (1 - frac) + x[hi] * frac

    if interp == "avgpool":
        k, v = pool(keys, np.mean), pool(values, np.mean)
    elif interp == "maxpool":
        k, v = pool(keys, np.max), pool(values, np.max)
    elif interp == "lerp":
        k, v = lerp(keys), lerp(values)
    else:
        raise PolicyError(f"unknown interpolation {interp!r}")
    return CompressedBlock(source_block, rate, interp, k.astype(keys.dtype), v.astype(values.dtype))


def with_compression(plan: CurationPlan, seq: InterleavedSequence, discard: Compress) -> CurationPlan:
    """Attach compressed copies of non-selected history VAE blocks to every image-visible layer."""
    dropped = [b for b in seq.history_blocks(BlockKind.VAE) if b.turn not in plan.syn_turns]
    vae_start = {b.start for b in seq.history_blocks(BlockKind.VAE)}
    compressed = {}
    for layer, idx in plan.per_layer_visible.items():
        shows_images = idx.size > 0 and bool(np.isin(idx, list(vae_start)).any())
        if shows_images and dropped:
            compressed[layer] = tuple(dropped)
    return CurationPlan(plan.variant, plan.grd_turns, plan.syn_turns, plan.ell_syn,
                        plan.per_layer_visible, compressed, (discard.rate, discard.interp), plan.warnings)


def make_plan(variant: PolicyVariant, dump: QkDump, seq: InterleavedSequence, cfg: RunConfig) -> CurationPlan:
    """Dispatch on the policy variant; apply compress-style discard to image-level plans."""
    if isinstance(variant, DenseKv):
        return dense_plan(seq, dump.layers)
    if isinstance(variant, SlidingWindow):
        plan = sliding_window_plan(seq, variant.n, dump.layers)
    elif isinstance(variant, UniLongGen):
        plan = probe.build_plan(dump, seq, cfg)
    elif isinstance(variant, SingleProbe):
        plan = single_probe_plan(dump, seq, cfg, variant.kind, variant.layer)
    elif isinstance(variant, TokenLevel):
        return token_level_plan(dump, seq, cfg, variant.budget)
    elif isinstance(variant, GroupedToken):
        return grouped_token_plan(dump, seq, cfg, variant.group_size, variant.budget)
    elif isinstance(variant, SemanticOracle):
        plan = semantic_oracle_plan(seq, variant.as_dict(), cfg.k_img, dump, cfg)
    elif isinstance(variant, TextBlockMatch):
        plan = text_block_match_plan(dump, seq, variant.k, variant.layer, cfg.split_layer)
    else:
        raise PolicyError(f"unsupported policy {variant!r}")
    if isinstance(cfg.discard, Compress):
        plan = with_compression(plan, seq, cfg.discard)
    return plan


def describe(variant: PolicyVariant) -> str:
    return variant_name(variant)
