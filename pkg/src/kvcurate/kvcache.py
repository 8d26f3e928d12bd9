"""Per-layer KV store with strict eviction, tri-context CFG bookkeeping and attention cost.

Attention FLOPs are counted as ``4 * visible * current * heads * head_dim``
per layer: one multiply-add (2 FLOPs) per element for ``Q K^T`` and one for
``P V``. Softmax work is not counted.
"""

from __future__ import annotations

import csv
import io
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .config import DenseKv, PolicyVariant, RunConfig, UniLongGen
from .policy import compress_block, make_plan
from .probe import CurationPlan
from .qkio import QkDump
from .sequence import Block, BlockKind, InterleavedSequence, build_sequence

FLOPS_PER_MAC = 2
ATTN_MATMULS = 2


class CacheError(ValueError):
    pass


class SequencingError(CacheError):
    pass


@dataclass(frozen=True, eq=False)
class LayerKv:
    """Rows ``[:n_real]`` are original tokens in ascending order; the tail rows are compressed."""

    token_index: np.ndarray  # int64, -1 for compressed rows
    keys: np.ndarray  # [n, H, d]
    values: np.ndarray
    n_compressed: int = 0

    def __post_init__(self):
        for a in (self.token_index, self.keys, self.values):
            a.setflags(write=False)

    def __len__(self) -> int:
        return self.token_index.shape[0]


@dataclass(frozen=True, eq=False)
class KvCache:
    layers: tuple[LayerKv, ...]
    source_tokens: int  # history length before any eviction

    @property
    def layer_count(self) -> int:
        return len(self.layers)

    def lengths(self) -> list[int]:
        return [len(layer) for layer in self.layers]

    def visible_tokens(self) -> int:
        return sum(self.lengths())

    @classmethod
    def from_dump(cls, dump: QkDump, history_end: int, values: str = "random", seed: int = 0) -> "KvCache":
        """Cache over history tokens ``[0, history_end)``.

        Dumps carry no values; they are either seeded Gaussian noise or copies
        of the keys.
        """
        rng = np.random.default_rng([seed, 0x5EED])
        idx = np.arange(history_end, dtype=np.int64)
        layers = []
        for layer in range(dump.layers):
            k = np.array(dump.keys[layer, :history_end])
            if values == "keys":
                v = k.copy()
            else:
                v = rng.standard_normal(k.shape).astype(np.float32)
            layers.append(LayerKv(idx.copy(), k, v))
        return cls(tuple(layers), history_end)

    def equals(self, other: "KvCache") -> bool:
        if self.layer_count != other.layer_count:
            return False
        return all(np.array_equal(a.token_index, b.token_index) and np.array_equal(a.keys, b.keys)
                   and np.array_equal(a.values, b.values) for a, b in zip(self.layers, other.layers))


def apply_plan(cache: KvCache, plan: CurationPlan) -> KvCache:
    """Materialize the plan: each layer keeps exactly its visible tokens (plus compressed blocks).

    The result owns fresh arrays, so evicted rows cannot be reached through it.
    """
    if plan.layers != cache.layer_count:
        raise CacheError(f"plan covers {plan.layers} layers, cache has {cache.layer_count}")
    out = []
    for layer, kv in enumerate(cache.layers):
        if kv.n_compressed:
            raise CacheError("cannot re-apply a plan to an already curated cache")
        want = plan.per_layer_visible[layer]
        pos = np.searchsorted(kv.token_index, want)
        if len(kv):
            ok = (pos < len(kv)) & (kv.token_index[np.minimum(pos, len(kv) - 1)] == want)
        else:
            ok = np.zeros(want.shape, bool)
        if not ok.all():
            raise CacheError(f"layer {layer}: plan references tokens absent from cache, "
                             f"e.g. {int(want[~ok][0])}")
        keys, values = kv.keys[pos], kv.values[pos]
        index = kv.token_index[pos]
        extra = plan.per_layer_compressed.get(layer, ())
        if extra:
            ck, cv = [keys], [values]
            for b in extra:
                rows = np.searchsorted(kv.token_index, b.indices)
                cb = compress_block(kv.keys[rows], kv.values[rows], plan.compress[0], plan.compress[1], b)
                ck.append(cb.keys)
                cv.append(cb.values)
            keys, values = np.concatenate(ck), np.concatenate(cv)
            n_comp = keys.shape[0] - index.shape[0]
            index = np.concatenate([index, np.full(n_comp, -1, np.int64)])
        else:
            n_comp = 0
        out.append(LayerKv(np.array(index), np.array(keys), np.array(values), n_comp))
    return KvCache(tuple(out), cache.source_tokens)


# -- tri-context CFG bookkeeping --------------------------------------------

@dataclass(frozen=True)
class GuidanceParams:
    """CFG schedule, recorded and echoed only; the guidance arithmetic is not executed."""

    cfg_text_scale: float = 4.0
    cfg_img_scale: float = 1.5
    cfg_interval: tuple[float, float] = (0.4, 1.0)
    num_timesteps: int = 50
    timestep_shift: float = 3.0


@dataclass(frozen=True)
class TriContext:
    """Full context, text-CFG pre-context (one text behind) and image-free context."""

    full: tuple[Block, ...] = ()
    text_cfg: tuple[Block, ...] = ()
    img_cfg: tuple[Block, ...] = ()
    guidance: GuidanceParams = field(default_factory=GuidanceParams)

    def check(self) -> None:
        if any(b.kind in (BlockKind.VAE, BlockKind.VIT) for b in self.img_cfg):
            raise CacheError("image-free context holds image tokens")


def _check_order(ctx: TriContext, block: Block) -> None:
    if ctx.full and block.start < ctx.full[-1].stop:
        raise SequencingError(f"block at token {block.start} arrives before end of context "
                              f"({ctx.full[-1].stop})")


def ingest_text(ctx: TriContext, block: Block, generated: bool = False) -> TriContext:
    """Snapshot the full context as the text-CFG context, then append the text.

    Input texts also extend the image-free context; texts produced during a
    generation cycle do not.
    """
    if block.kind is not BlockKind.TEXT:
        raise CacheError(f"ingest_text got a {block.kind.value} block")
    _check_order(ctx, block)
    img = ctx.img_cfg if generated else ctx.img_cfg + (block,)
    return TriContext(ctx.full + (block,), ctx.full, img, ctx.guidance)


def ingest_image(ctx: TriContext, block: Block) -> TriContext:
    """Append a generated image to the full context, then refresh the text-CFG snapshot."""
    if block.kind not in (BlockKind.VAE, BlockKind.VIT, BlockKind.SPECIAL):
        raise CacheError(f"ingest_image got a {block.kind.value} block")
    _check_order(ctx, block)
    full = ctx.full + (block,)
    return TriContext(full, full, ctx.img_cfg, ctx.guidance)


# -- cost model --------------------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    visible_kv_fraction: float
    attention_flops: int
    wall_clock: float  # seconds, median over repeats
    visible_tokens: int = 0
    history_tokens: int = 0


def attention_flops(visible: int, current_len: int, heads: int, head_dim: int) -> int:
    return ATTN_MATMULS * FLOPS_PER_MAC * visible * current_len * heads * head_dim


def attention_kernel(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Scaled dot-product attention; q [C, H, d], k/v [n, H, d] -> [C, H, d]."""
    C, H, d = q.shape
    out = np.empty((C, H, v.shape[2]), dtype=np.float32)
    scale = np.float32(1.0 / math.sqrt(d))
    for h in range(H):
        s = (q[:, h] * scale) @ k[:, h].T
        s -= s.max(axis=1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(axis=1, keepdims=True)
        out[:, h] = s @ v[:, h]
    return out


def attention_cost(cache: KvCache, current_len: int, heads: int, head_dim: int, repeats: int = 3,
                   seed: int = 0, warmup: int = 1) -> CostModel:
    """Time the attention of ``current_len`` fresh queries over every layer's visible KV."""
    if repeats < 1:
        raise CacheError("repeats must be >= 1")
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        threadpool_limits = None
    rng = np.random.default_rng([seed, 0xC057])
    q = rng.standard_normal((current_len, heads, head_dim)).astype(np.float32)
    visible = cache.visible_tokens()
    flops = sum(attention_flops(len(layer), current_len, heads, head_dim) for layer in cache.layers)

    def run():
        for layer in cache.layers:
            if len(layer):
                attention_kernel(q, layer.keys, layer.values)

    times = []
    ctx = threadpool_limits(1) if threadpool_limits else _null()
    with ctx:
        for i in range(warmup + repeats):
            t0 = time.perf_counter()
            run()
            dt = time.perf_counter() - t0
            if i >= warmup:
                times.append(dt)
    total = cache.source_tokens * cache.layer_count
    frac = visible / total if total else 0.0
    return CostModel(frac, flops, statistics.median(times), visible, cache.source_tokens)


class _null:
    def __enter__(self):
        return self

    def __exit__(self, *a):
        return False


COST_COLUMNS = ("history_tokens", "visible_tokens", "kv_fraction", "flops", "wall_clock_ms", "policy")


def cost_rows_to_csv(rows: list[tuple[str, CostModel]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COST_COLUMNS)
    for policy, c in rows:
        w.writerow([c.history_tokens, c.visible_tokens, f"{c.visible_kv_fraction:.6f}", c.attention_flops,
                    f"{c.wall_clock * 1e3:.3f}", policy])
    return buf.getvalue()


# -- runtime-scaling sweep ---------------------------------------------------

@dataclass(frozen=True)
class CostConfig:
    """History lengths to benchmark and the synthetic geometry they share.

    Two layers suffice for the layer-split plan: layer 0 probes and shows
    text, layer 1 probes and shows images.
    """

    history_tokens: tuple[int, ...] = (25_000, 50_000, 100_000)
    tokens_per_image: int = 1024
    tokens_per_text: int = 64
    current_tokens: int = 512
    heads: int = 4
    head_dim: int = 32
    k_img: int = 4
    repeats: int = 3
    warmup: int = 1
    seed: int = 0

    def __post_init__(self):
        turn = self.tokens_per_image + self.tokens_per_text
        if not self.history_tokens or min(self.history_tokens) < turn * (self.k_img + 1):
            raise CacheError(f"each history length must hold more than k_img={self.k_img} turns of {turn} tokens")
        if self.repeats < 1 or self.warmup < 0:
            raise CacheError("repeats must be >= 1 and warmup >= 0")
        object.__setattr__(self, "history_tokens", tuple(int(n) for n in self.history_tokens))

    @classmethod
    def from_json(cls, obj: dict) -> "CostConfig":
        if not isinstance(obj, dict):
            raise CacheError("cost config must be a JSON object")
        unknown = set(obj) - {f.name for f in fields(cls)}
        if unknown:
            raise CacheError(f"unknown cost config field(s): {sorted(unknown)}")
        kw = dict(obj)
        if "history_tokens" in kw:
            kw["history_tokens"] = tuple(kw["history_tokens"])
        return cls(**kw)

    def to_json(self) -> dict:
        out = asdict(self)
        out["history_tokens"] = list(self.history_tokens)
        return out


def cost_layout(cfg: CostConfig, history_tokens: int) -> InterleavedSequence:
    """Whole text+image turns filling at most ``history_tokens``, then the current turn."""
    m = history_tokens // (cfg.tokens_per_text + cfg.tokens_per_image)
    spec = []
    for i in range(1, m + 1):
        spec += [(i, BlockKind.TEXT, cfg.tokens_per_text), (i, BlockKind.VAE, cfg.tokens_per_image)]
    spec += [(m + 1, BlockKind.TEXT, cfg.tokens_per_text), (m + 1, BlockKind.VAE, cfg.current_tokens)]
    return build_sequence(spec)


def cost_sweep(cfg: CostConfig, policies: tuple[PolicyVariant, ...] = (DenseKv(), UniLongGen())
               ) -> list[tuple[str, CostModel]]:
    """Time each policy's curated attention at every history length."""
    from .config import variant_name

    run_cfg = RunConfig(ell_grd=0, ell_syn=1, k_img=cfg.k_img, seed=cfg.seed)
    rows = []
    for n in cfg.history_tokens:
        seq = cost_layout(cfg, n)
        rng = np.random.default_rng([cfg.seed, n])
        qk = rng.standard_normal((2, seq.total_tokens, cfg.heads, cfg.head_dim), dtype=np.float32)
        dump = QkDump(qk, qk)
        cache = KvCache.from_dump(dump, seq.history_end, seed=cfg.seed)
        for policy in policies:
            curated = apply_plan(cache, make_plan(policy, dump, seq, run_cfg))
            cost = attention_cost(curated, cfg.current_tokens, cfg.heads, cfg.head_dim,
                                  repeats=cfg.repeats, seed=cfg.seed, warmup=cfg.warmup)
            rows.append((variant_name(policy), cost))
        del dump, cache, qk
    return rows
