"""Seeded synthetic interleaved Q/K dumps with planted structure, and a horizon harness.

Geometry, per layer and head: a unit *subject* direction ``s``. Current-image
queries are ``query_gain * s + noise``. Keys of planted turns' images are
shifted by ``subject_gain * s``; keys of other images are isotropic noise,
except that each token is, with probability ``outlier_prob``, replaced by an
outlier of norm ``outlier_gain`` pointing partly along ``s``. Text keys are
lower-variance noise. ``depth_tilt`` adds a per-layer shift along ``s`` to all
text and all image keys.

Every turn draws from its own seeded stream, so a config with more turns
extends, rather than reshuffles, the history of a config with fewer.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from .config import DenseKv, PolicyVariant, RunConfig
from .diagnostics import softmax_rows
from .policy import compress_block, make_plan
from .qkio import QkDump
from .sequence import BlockKind, InterleavedSequence, build_sequence

_TAG_SUBJECT, _TAG_TURN, _TAG_CURRENT, _TAG_STEP = 0, 1, 2, 3


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    m: int = 20
    tokens_per_image: int = 64
    tokens_per_text: int = 16
    planted_turns: tuple[int, ...] = (1, 6, 11, 16)
    subject_gain: float = 1.5
    outlier_prob: float = 0.0
    outlier_gain: float = 0.0
    depth_tilt: tuple[tuple[float, float], ...] | None = None
    steps: int = 1
    seed: int = 0
    layers: int = 16
    heads: int = 4
    head_dim: int = 16
    current_tokens: int = 16
    query_gain: float = 4.0
    key_noise: float = 1.0
    text_noise: float = 0.5
    outlier_align: float = 0.6
    tilt_gain: float = 0.0
    vit_tokens: int = 0
    history_modality: str = "image"  # "text": non-planted images become token-matched text
    hijack_threshold: float = 0.1

    def __post_init__(self):
        if self.m < 0 or self.tokens_per_image < 1 or self.tokens_per_text < 1:
            raise SynthError("m >= 0 and positive block sizes required")
        if any(not 1 <= t for t in self.planted_turns):
            raise SynthError("planted turns must be >= 1")
        if not 0 <= self.outlier_prob < 0.1:
            raise SynthError("outlier_prob must lie in [0, 0.1)")
        if self.steps < 1:
            raise SynthError("steps must be >= 1")
        if self.depth_tilt is not None and len(self.depth_tilt) != self.layers:
            raise SynthError("depth_tilt needs one (text, vae) pair per layer")
        if self.history_modality not in ("image", "text"):
            raise SynthError("history_modality must be 'image' or 'text'")
        object.__setattr__(self, "planted_turns", tuple(sorted(set(self.planted_turns))))

    @property
    def planted(self) -> frozenset[int]:
        return frozenset(t for t in self.planted_turns if t <= self.m)

    def tilt(self) -> np.ndarray:
        """[layers, 2] (text, vae) shifts; default is a linear crossover scaled by ``tilt_gain``."""
        if self.depth_tilt is not None:
            return np.asarray(self.depth_tilt, dtype=np.float64)
        t = np.linspace(0.0, 1.0, self.layers) if self.layers > 1 else np.ones(1)
        return self.tilt_gain * np.stack([1.0 - t, t], axis=1)

    def to_json(self) -> dict:
        out = asdict(self)
        out["planted_turns"] = list(self.planted_turns)
        if self.depth_tilt is not None:
            out["depth_tilt"] = [list(p) for p in self.depth_tilt]
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "SynthConfig":
        allowed = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - allowed
        if unknown:
            raise SynthError(f"unknown SynthConfig field(s): {sorted(unknown)}")
        kw = dict(obj)
        if "planted_turns" in kw:
            kw["planted_turns"] = tuple(kw["planted_turns"])
        if kw.get("depth_tilt") is not None:
            kw["depth_tilt"] = tuple(tuple(p) for p in kw["depth_tilt"])
        return cls(**kw)


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng([seed, *tags])


def _subject(cfg: SynthConfig) -> np.ndarray:
    s = _rng(cfg.seed, _TAG_SUBJECT).standard_normal((cfg.layers, cfg.heads, cfg.head_dim))
    return s / np.linalg.norm(s, axis=-1, keepdims=True)


def _outliers(rng, cfg: SynthConfig, s: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """(mask [L, n], outlier keys [L, n, H, d]); always consumes the same draws."""
    L, H, d = cfg.layers, cfg.heads, cfg.head_dim
    mask = rng.random((L, n)) < cfg.outlier_prob
    g = rng.standard_normal((L, n, H, d))
    g -= (g * s[:, None]).sum(-1, keepdims=True) * s[:, None]
    g /= np.linalg.norm(g, axis=-1, keepdims=True)
    a = cfg.outlier_align
    u = a * s[:, None] + math.sqrt(1 - a * a) * g
    return mask, cfg.outlier_gain * u


def _layout(cfg: SynthConfig) -> list[tuple[int, BlockKind, int]]:
    spec = []
    planted = cfg.planted
    for i in range(1, cfg.m + 1):
        as_text = cfg.history_modality == "text" and i not in planted
        if as_text:
            spec.append((i, BlockKind.TEXT, cfg.tokens_per_text + cfg.tokens_per_image))
            continue
        spec.append((i, BlockKind.TEXT, cfg.tokens_per_text))
        if cfg.vit_tokens:
            spec.append((i, BlockKind.VIT, cfg.vit_tokens))
        spec.append((i, BlockKind.VAE, cfg.tokens_per_image))
    cur = cfg.m + 1
    spec.append((cur, BlockKind.TEXT, cfg.tokens_per_text))
    spec.append((cur, BlockKind.VAE, cfg.current_tokens))
    return spec


def generate(cfg: SynthConfig) -> tuple[QkDump, InterleavedSequence]:
    """Deterministic dump and layout for ``cfg`` (m history turns plus the current image)."""
    seq = build_sequence(_layout(cfg))
    L, H, d, N = cfg.layers, cfg.heads, cfg.head_dim, seq.total_tokens
    s = _subject(cfg)
    tilt = cfg.tilt()
    q = np.empty((L, N, H, d), dtype=np.float32)
    k = np.empty((L, N, H, d), dtype=np.float32)
    planted = cfg.planted

    def text_keys(rng, n, layer_shift):
        return cfg.text_noise * rng.standard_normal((L, n, H, d)) + layer_shift[:, None, None, None] * s[:, None]

    for turn in seq.turns:
        rng = _rng(cfg.seed, _TAG_TURN, turn.index)
        for b in turn.all_blocks():
            n = len(b)
            q[:, b.start:b.stop] = rng.standard_normal((L, n, H, d))
            if b.kind is BlockKind.VAE:
                keys = cfg.key_noise * rng.standard_normal((L, n, H, d))
                keys += tilt[:, 1, None, None, None] * s[:, None]
                mask, out = _outliers(rng, cfg, s, n)
                if turn.index in planted:
                    keys += cfg.subject_gain * s[:, None]
                else:
                    keys[mask] = out[mask]
            else:
                keys = text_keys(rng, n, tilt[:, 0])
            k[:, b.start:b.stop] = keys

    rng = _rng(cfg.seed, _TAG_CURRENT)
    ct, cv = seq.current.text_block, seq.current_vae
    q[:, ct.start:ct.stop] = rng.standard_normal((L, len(ct), H, d))
    k[:, ct.start:ct.stop] = text_keys(rng, len(ct), tilt[:, 0])
    q[:, cv.start:cv.stop] = cfg.query_gain * s[:, None] + rng.standard_normal((L, len(cv), H, d))
    k[:, cv.start:cv.stop] = cfg.key_noise * rng.standard_normal((L, len(cv), H, d))
    return QkDump(q, k), seq


def prefix(dump: QkDump, seq: InterleavedSequence, slot: int) -> tuple[QkDump, InterleavedSequence]:
    """History restricted to turns ``< slot`` followed by the unchanged current turn."""
    keep = [b for b in seq.blocks if b.turn < slot or b.turn == seq.current.index]
    rows = np.concatenate([b.indices for b in keep])
    new_seq = build_sequence([(b.turn, b.kind, len(b)) for b in keep])
    return dump.take_tokens(rows), new_seq


# -- horizon harness ---------------------------------------------------------

@dataclass(frozen=True)
class DegradationProxy:
    image_index: int
    pollution: float
    grounding: float
    text_share: float
    hijack_events: int
    entropy: float
    history_fraction: float
    visible_tokens: int


def step_queries(dump: QkDump, seq: InterleavedSequence, cfg: SynthConfig, layer: int) -> list[np.ndarray]:
    """Current queries at each refinement step: a noisy start blending into the final queries."""
    cv = seq.current_vae
    final = dump.queries[layer, cv.start:cv.stop].astype(np.float64)
    out = []
    for t in range(cfg.steps):
        a = (t + 1) / cfg.steps
        if a == 1.0:
            out.append(final)
            continue
        noise = _rng(cfg.seed, _TAG_STEP, t).standard_normal(final.shape)
        out.append(a * final + (1 - a) * noise)
    return out


def _visible_context(plan, dump, seq, layer, values_seed):
    """(keys [n,H,d], per-column turn, per-column is-image flag) for history then current."""
    idx = plan.per_layer_visible[layer]
    kinds = seq.kind_array()
    turns = seq.turn_array()
    keys = [dump.keys[layer, idx].astype(np.float64)]
    col_turn = [turns[idx]]
    col_img = [kinds[idx] == 2]
    for b in plan.per_layer_compressed.get(layer, ()):
        kk = dump.keys[layer, b.start:b.stop]
        cb = compress_block(kk, kk, plan.compress[0], plan.compress[1], b)
        keys.append(cb.keys.astype(np.float64))
        col_turn.append(np.full(len(cb), b.turn))
        col_img.append(np.ones(len(cb), bool))
    n_hist = sum(a.shape[0] for a in keys)
    cur = np.arange(seq.history_end, seq.total_tokens)
    keys.append(dump.keys[layer, cur].astype(np.float64))
    col_turn.append(turns[cur])
    col_img.append(np.zeros(cur.size, bool))
    return np.concatenate(keys), np.concatenate(col_turn), np.concatenate(col_img), n_hist


def measure_slot(dump: QkDump, seq: InterleavedSequence, cfg: SynthConfig, policy: PolicyVariant,
                 run_cfg: RunConfig, layer: int, image_index: int) -> DegradationProxy:
    if seq.m == 0:
        return DegradationProxy(image_index, 0.0, 0.0, 0.0, 0, 0.0, 0.0, 0)
    plan = make_plan(policy, dump, seq, run_cfg)
    keys, col_turn, col_img, n_hist = _visible_context(plan, dump, seq, layer, cfg.seed)
    planted = np.isin(col_turn, list(cfg.planted))
    hist = np.zeros(col_turn.size, bool)
    hist[:n_hist] = True
    pol_cols = hist & col_img & ~planted
    grd_cols = hist & col_img & planted
    d = dump.head_dim
    pol = grd = txt = hf = ent = 0.0
    hijacks = 0
    queries = step_queries(dump, seq, cfg, layer)
    for q in queries:
        avg = np.zeros((q.shape[0], keys.shape[0]))
        hijacked = False
        for h in range(dump.heads):
            w = softmax_rows(q[:, h] @ keys[:, h].T / math.sqrt(d))
            avg += w
            if pol_cols.any() and (w[:, pol_cols].max() >= cfg.hijack_threshold):
                hijacked = True
        avg /= dump.heads
        hijacks += hijacked
        mass = avg.sum(axis=0)
        hmass = mass[hist].sum()
        if hmass > 0:
            pol += mass[pol_cols].sum() / hmass
            grd += mass[grd_cols].sum() / hmass
            txt += mass[hist & ~col_img].sum() / hmass
        hf += hmass / mass.sum()
        with np.errstate(divide="ignore", invalid="ignore"):
            ent += float(-np.where(avg > 0, avg * np.log(avg), 0.0).sum(axis=1).mean())
    n = len(queries)
    return DegradationProxy(image_index, pol / n, grd / n, txt / n, hijacks, ent / n, hf / n, n_hist)


def run_horizon(cfg: SynthConfig, policy: PolicyVariant = DenseKv(), run_cfg: RunConfig | None = None,
                slots=None, layer: int | None = None) -> list[DegradationProxy]:
    """Proxies for image slots ``1..m``: slot ``i`` sees history turns ``1..i-1``.

    Attention is measured at ``layer`` (default: the last layer) with the
    current image's queries, over the policy's visible history plus the
    current turn's own tokens, averaged over refinement steps.
    """
    if run_cfg is None:
        run_cfg = default_run_config(cfg)
    layer = cfg.layers - 1 if layer is None else layer
    dump, seq = generate(cfg)
    slots = range(1, cfg.m + 1) if slots is None else slots
    out = []
    for i in slots:
        pd, ps = prefix(dump, seq, i)
        out.append(measure_slot(pd, ps, cfg, policy, run_cfg, layer, i))
    return out


def default_run_config(cfg: SynthConfig, **kw) -> RunConfig:
    """RunConfig whose probe layers fit the synthetic depth (layers 1 and 15 when ``layers >= 16``)."""
    if cfg.layers >= 16:
        base = dict(ell_grd=1, ell_syn=15)
    elif cfg.layers >= 2:
        base = dict(ell_grd=0, ell_syn=cfg.layers - 1)
    else:
        base = dict(ell_grd=0, ell_syn=1)
    base.update(seed=cfg.seed % 2**64)
    base.update(kw)
    return RunConfig(**base)


# -- analytic oracle ---------------------------------------------------------

def hijack_share(n_keys: int, delta: float) -> float:
    """Softmax mass of one key whose logit exceeds ``n_keys - 1`` equal others by ``delta``."""
    if n_keys < 2:
        raise SynthError("n_keys must be >= 2")
    return 1.0 / (1.0 + (n_keys - 1) * math.exp(-delta))


def empirical_hijack_share(n_keys: int, delta: float) -> float:
    logits = np.zeros(n_keys)
    logits[0] = delta
    return float(softmax_rows(logits[None, :])[0, 0])


# -- canned experiments ------------------------------------------------------

PRESETS: dict[str, SynthConfig] = {
    # grounding proxy under dense KV roughly halves by slot ~20 (a calibration, not a prediction)
    "paper_matched": SynthConfig(m=30, tokens_per_image=256, tokens_per_text=16, planted_turns=(1, 2, 3),
                                 subject_gain=2.5, outlier_prob=0.003, outlier_gain=8.0, layers=2,
                                 steps=2),
    "event_bottleneck": SynthConfig(m=20, tokens_per_image=512, tokens_per_text=16, planted_turns=(1, 3),
                                    subject_gain=1.5, outlier_prob=0.003, outlier_gain=8.0, layers=1,
                                    current_tokens=8, steps=1),
    "heavy_tail": SynthConfig(m=22, tokens_per_image=256, planted_turns=(1,), subject_gain=1.0,
                              outlier_prob=0.01, outlier_gain=14.0, layers=1, key_noise=1.5),
    "key_reference": SynthConfig(m=21, tokens_per_image=64, planted_turns=(), layers=1,
                                 outlier_prob=0.0),
    "depth_specialized": SynthConfig(m=8, tokens_per_image=32, tokens_per_text=32, planted_turns=(1,),
                                     layers=16, tilt_gain=1.5, vit_tokens=16),
}


def preset(name: str, **overrides) -> SynthConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise SynthError(f"unknown preset {name!r}; have {sorted(PRESETS)}") from None
    return replace(base, **overrides)


def key_reference_curve(cfg: SynthConfig, n_max: int, layer: int = -1) -> list[float]:
    """Reference-turn share of image attention with 0..n_max distractor turns appended."""
    from .diagnostics import AttentionSlice, key_reference_mass

    cfg = replace(cfg, m=max(cfg.m, n_max + 1))
    dump, seq = generate(cfg)
    layer = layer % cfg.layers
    rows = seq.current_vae.indices
    out = []
    d = dump.head_dim
    logits = []
    all_cols = np.arange(seq.history_end)
    for h in range(dump.heads):
        logits.append(dump.queries[layer, rows, h].astype(np.float64)
                      @ dump.keys[layer, all_cols, h].astype(np.float64).T / math.sqrt(d))
    for n in range(n_max + 1):
        end = seq.turns[n + 1].start if n + 1 < seq.m else seq.history_end
        w = sum(softmax_rows(lg[:, :end].copy()) for lg in logits) / dump.heads
        out.append(key_reference_mass(AttentionSlice(w, layer, columns=all_cols[:end]), seq, 1))
    return out


def entropy_curve(cfg: SynthConfig, turn_counts, layer: int = -1) -> list[float]:
    """Mean attention entropy of the current image over history ∪ current as turns are appended."""
    from .diagnostics import attention_entropy, slice_from_dump

    cfg = replace(cfg, m=max(max(turn_counts), cfg.m))
    dump, seq = generate(cfg)
    layer = layer % cfg.layers
    cur = np.arange(seq.history_end, seq.total_tokens)
    out = []
    for j in turn_counts:
        end = seq.turns[j].start if j < seq.m else seq.history_end
        cols = np.concatenate([np.arange(end), cur])
        out.append(attention_entropy(slice_from_dump(dump, layer, seq.current_vae.indices, cols)))
    return out


def recency_biased(seed: int, m: int = 6, planted: int = 2, n: int = 32, heads: int = 4,
                   head_dim: int = 16) -> tuple[QkDump, InterleavedSequence]:
    """History where the most recent image matches individual current queries sharply
    while a distant reference matches their mean.

    Each recent-turn key copies the residual of one current query (sharp,
    query-specific matches that dominate post-softmax mass) plus a mild subject
    component; the reference turn's keys carry a strong subject component
    shared by all queries; the remaining turns are distractor noise.
    """
    rng = _rng(seed, 0xEC)
    H, d = heads, head_dim
    s = rng.standard_normal((H, d))
    s /= np.linalg.norm(s, axis=-1, keepdims=True)
    spec = []
    for i in range(1, m + 1):
        spec += [(i, BlockKind.TEXT, 8), (i, BlockKind.VAE, n)]
    spec += [(m + 1, BlockKind.TEXT, 8), (m + 1, BlockKind.VAE, n)]
    seq = build_sequence(spec)
    N = seq.total_tokens
    q = rng.standard_normal((1, N, H, d))
    k = 0.5 * rng.standard_normal((1, N, H, d))
    cv = seq.current_vae
    resid = rng.standard_normal((n, H, d))
    q[0, cv.start:cv.stop] = 4.0 * s + resid
    ref = seq.turn(planted).vae_block
    k[0, ref.start:ref.stop] += 4.0 * s
    rec = seq.turn(m).vae_block
    k[0, rec.start:rec.stop] = 3.0 * resid + 0.5 * s + 0.2 * rng.standard_normal((n, H, d))
    return QkDump(q, k), seq


def summarize(proxies: list[DegradationProxy]) -> dict:
    return {f: [getattr(p, f) for p in proxies] for f in DegradationProxy.__dataclass_fields__}


__all__ = [
    "SynthConfig", "generate", "prefix", "run_horizon", "DegradationProxy", "hijack_share",
    "empirical_hijack_share", "PRESETS", "preset", "key_reference_curve", "entropy_curve",
    "recency_biased", "default_run_config", "summarize",
]
