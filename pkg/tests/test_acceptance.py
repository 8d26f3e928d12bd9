"""Acceptance gate: one test per criterion, each reported as PASS/FAIL in the terminal summary."""

import json
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from helpers import random_dump, random_layout_spec
from kvcurate import cli, synthlab
from kvcurate.config import DenseKv, RunConfig
from kvcurate.diagnostics import (AttentionSlice, coverage_and_gini, cut_tree, layer_cluster, slice_from_dump,
                                  ward_linkage)
from kvcurate.kvcache import CostConfig, KvCache, TriContext, apply_plan, cost_sweep, ingest_image, ingest_text
from kvcurate.policy import compress_block
from kvcurate.probe import build_plan, relevance_report, relevance_report_post_softmax
from kvcurate.qkio import QkDump
from kvcurate.sequence import Block, BlockKind, build_sequence


def _detail(record_property, text):
    record_property("detail", text)


# -- 1 -----------------------------------------------------------------------

def _naive_score(dump, cur, block, layer):
    """Triple loop over tokens, heads and channels with exact summation."""
    H, d = dump.heads, dump.head_dim
    Q = dump.queries[layer].tolist()
    K = dump.keys[layer].tolist()
    qbar = [[math.fsum(Q[t][h][c] for t in range(cur.start, cur.stop)) / len(cur) for c in range(d)]
            for h in range(H)]
    total = []
    for u in range(block.start, block.stop):
        for h in range(H):
            for c in range(d):
                total.append(qbar[h][c] * K[u][h][c])
    return math.fsum(total) / (H * math.sqrt(d)) / len(block)


@pytest.mark.criterion(1, "scoring oracle equivalence")
def test_c01_scoring_oracle(record_property):
    spec = []
    for i in range(1, 21):
        spec += [(i, "text", 16), (i, "vae", 80)]
    spec += [(21, "text", 16), (21, "vae", 112)]
    seq = build_sequence(spec)
    assert seq.total_tokens == 2048
    worst, runtime = 0.0, 0.0
    for seed in range(3):
        dump = random_dump(seq, layers=2, heads=4, head_dim=16, seed=seed, q_shift=0.7, k_shift=0.3)
        for layer in range(2):
            t0 = time.perf_counter()
            reports = {k: relevance_report(dump, seq, k, layer) for k in (BlockKind.TEXT, BlockKind.VAE)}
            runtime = max(runtime, time.perf_counter() - t0)
            for kind, rep in reports.items():
                for turn in seq.turns:
                    want = _naive_score(dump, seq.current_vae, turn.block(kind), layer)
                    got = rep.scores[turn.index]
                    worst = max(worst, abs(got - want) / abs(want))
    _detail(record_property, f"max relative error {worst:.2e} (tol 1e-9), scoring time {runtime:.3f}s (< 1s)")
    assert worst <= 1e-9
    assert runtime < 1.0


# -- 2 -----------------------------------------------------------------------

@pytest.mark.criterion(2, "ranking invariance under key scaling")
def test_c02_scale_invariance(record_property):
    cfg = RunConfig()
    checked = 0
    for seed in range(10):
        dump, seq = synthlab.generate(synthlab.SynthConfig(m=12, tokens_per_image=24, tokens_per_text=8,
                                                           layers=16, seed=seed))
        base_plan = build_plan(dump, seq, cfg)
        base_ranks = [relevance_report(dump, seq, k, l).ranking for k in ("text", "vae") for l in (1, 15)]
        for c in (0.01, 1.0, 100.0):
            scaled = QkDump(dump.queries, dump.keys * np.float32(c))
            ranks = [relevance_report(scaled, seq, k, l).ranking for k in ("text", "vae") for l in (1, 15)]
            plan = build_plan(scaled, seq, cfg)
            assert ranks == base_ranks
            assert plan.same_visibility(base_plan)
            assert (plan.grd_turns, plan.syn_turns) == (base_plan.grd_turns, base_plan.syn_turns)
            checked += 1
    _detail(record_property, f"{checked} (seed, c) pairs with identical rankings and plans")


# -- 3 -----------------------------------------------------------------------

def _oracle_visible(dump, entries, ell_grd, ell_syn, k_grd, k_img):
    """Recompute the layer-split visibility straight from the sidecar entries."""
    entries = sorted(entries, key=lambda e: e["start"])
    cur = entries[-1]
    history = [e for e in entries if e["turn"] not in (0, cur["turn"])]
    H, d = dump.heads, dump.head_dim

    def top(kind, layer, k):
        q = dump.queries[layer, cur["start"]:cur["start"] + cur["len"]].astype(np.float64).mean(axis=0)
        scores = {}
        for e in history:
            if e["kind"] != kind:
                continue
            keys = dump.keys[layer, e["start"]:e["start"] + e["len"]].astype(np.float64)
            scores[e["turn"]] = float((keys * q).sum(axis=(1, 2)).mean() / (H * math.sqrt(d)))
        chosen = set(sorted(scores, key=lambda t: (-scores[t], t))[:k])
        if any(e["turn"] == 1 for e in history):
            chosen.add(1)
        return chosen

    def tokens(turns, kind):
        out = []
        for e in history:
            if e["kind"] == kind and e["turn"] in turns:
                out.extend(range(e["start"], e["start"] + e["len"]))
        return sorted(out)

    grd, syn = top("text", ell_grd, k_grd), top("vae", ell_syn, k_img)
    early, late = tokens(grd, "text"), tokens(syn, "vae")
    return [early if layer < ell_syn else late for layer in range(dump.layers)]


@pytest.mark.criterion(3, "policy correctness of default plan")
def test_c03_default_plan_matches_formula(record_property):
    rng = np.random.default_rng(2024)
    cfg = RunConfig()
    layers_checked = 0
    for trial in range(100):
        seq = build_sequence(random_layout_spec(rng))
        dump = random_dump(seq, layers=16, heads=2, head_dim=8, seed=trial)
        cache = KvCache.from_dump(dump, seq.history_end, seed=trial)
        curated = apply_plan(cache, build_plan(dump, seq, cfg))
        want = _oracle_visible(dump, json.loads(seq.dumps()), 1, 15, cfg.k_grd, cfg.k_img)
        for layer, kv in enumerate(curated.layers):
            assert kv.token_index.tolist() == want[layer], (trial, layer)
            np.testing.assert_array_equal(kv.keys, dump.keys[layer, want[layer]])
            layers_checked += 1
    _detail(record_property, f"100 random layouts, {layers_checked} layers match the recomputed formula")


# -- 4 -----------------------------------------------------------------------

@pytest.mark.criterion(4, "softmax hijack oracle")
def test_c04_hijack_oracle(record_property):
    worst = 0.0
    for n in (10, 10**3, 10**5):
        for delta in (0.0, math.log(n - 1), 12.0):
            worst = max(worst, abs(synthlab.empirical_hijack_share(n, delta) - synthlab.hijack_share(n, delta)))
    _detail(record_property, f"max |empirical - closed form| = {worst:.1e} (tol 1e-12)")
    assert worst <= 1e-12


# -- 5 -----------------------------------------------------------------------

KEY_REF_N = 20


@pytest.mark.slow
@pytest.mark.criterion(5, "key-reference erosion")
def test_c05_key_reference_erosion(record_property):
    t0 = time.perf_counter()
    cfg = synthlab.preset("key_reference")
    curves = np.array([synthlab.key_reference_curve(replace(cfg, seed=s), KEY_REF_N) for s in range(1000)])
    mean = curves.mean(axis=0)
    elapsed = time.perf_counter() - t0
    _detail(record_property, f"share N=0 {mean[0]:.3f}, N=1 {mean[1]:.3f}, N={KEY_REF_N} {mean[-1]:.4f}; "
                             f"monotone={bool(np.all(np.diff(mean) < 0))}; {elapsed:.1f}s")
    assert np.all(np.diff(mean) < 0)
    assert abs(mean[1] - 0.5) <= 0.02
    assert mean[KEY_REF_N] <= 0.05
    assert elapsed < 60


# -- 6 -----------------------------------------------------------------------

def _mean_pollution(cfg, seeds):
    return float(np.mean([synthlab.run_horizon(replace(cfg, seed=s), DenseKv(), slots=[cfg.m])[0].pollution
                          for s in range(seeds)]))


@pytest.mark.slow
@pytest.mark.criterion(6, "event bottleneck dissociation")
def test_c06_event_bottleneck(record_property):
    base = synthlab.preset("event_bottleneck")
    fixed_m = [_mean_pollution(replace(base, tokens_per_image=t), 200) for t in (512, 1024, 2048)]
    spread = (max(fixed_m) - min(fixed_m)) / min(fixed_m)
    budget = 15360
    fixed_budget = [_mean_pollution(replace(base, m=m, tokens_per_image=budget // m), 200) for m in (5, 30)]
    growth = fixed_budget[1] / fixed_budget[0]
    _detail(record_property, f"fixed m=20 pollution {np.round(fixed_m, 4).tolist()} spread {spread:.1%} (<= 10%); "
                             f"fixed budget m=5 -> 30 growth {growth:.2f}x (>= 2x)")
    assert spread <= 0.10
    assert growth >= 2.0


# -- 7 -----------------------------------------------------------------------

def sign_test_p(successes: int, n: int) -> float:
    """One-sided binomial tail P(X >= successes) under p = 1/2."""
    return sum(math.comb(n, k) for k in range(successes, n + 1)) / 2**n


@pytest.mark.criterion(7, "entropy growth with distractors")
def test_c07_entropy_growth(record_property):
    counts = [4, 8, 16, 29]
    wins = 0
    for seed in range(50):
        curve = synthlab.entropy_curve(synthlab.preset("paper_matched", seed=seed), counts)
        wins += all(b > a for a, b in zip(curve, curve[1:]))
    p = sign_test_p(wins, 50)
    _detail(record_property, f"{wins}/50 seeds strictly increasing over {counts} turns, sign test p = {p:.1e}")
    assert p < 0.01


# -- 8 -----------------------------------------------------------------------

@pytest.mark.criterion(8, "coverage and Gini")
def test_c08_coverage_gini(record_property):
    for n in (10, 100, 1000):
        conc = coverage_and_gini(AttentionSlice(np.full((3, n), 1.0 / n)), (10,))
        assert conc.gini == 0.0
        assert conc.coverage[0] == 0.10
    cov = []
    for seed in range(20):
        dump, seq = synthlab.generate(synthlab.preset("heavy_tail", seed=seed))
        s = slice_from_dump(dump, 0, seq.current_vae.indices, np.arange(seq.total_tokens))
        cov.append(coverage_and_gini(s, (10,)).coverage[0])
    _detail(record_property, f"uniform: Gini 0, coverage(10%) 0.10 exactly; heavy-tail coverage(10%) "
                             f"mean {np.mean(cov):.3f}, min {np.min(cov):.3f} (> 0.5)")
    assert min(cov) > 0.5


# -- 9 -----------------------------------------------------------------------

@pytest.mark.criterion(9, "pre- vs post-softmax recency bias")
def test_c09_recency_bias(record_property):
    ok = 0
    for seed in range(100):
        dump, seq = synthlab.recency_biased(seed, m=6, planted=2)
        pre = relevance_report(dump, seq, "vae", 0).ranking[0]
        post = relevance_report_post_softmax(dump, seq, "vae", 0).ranking[0]
        ok += pre == 2 and post == 6
    _detail(record_property, f"{ok}/100 seeds: pre-softmax picks planted turn 2, post-softmax picks recent turn 6")
    assert ok == 100


# -- 10 ----------------------------------------------------------------------

def _same_partition(a, b) -> bool:
    pairs = set(zip(a, b))
    return len(pairs) == len(set(a)) == len(set(b))


@pytest.mark.criterion(10, "Ward clustering recovery")
def test_c10_ward(record_property):
    rng = np.random.default_rng(10)
    for _ in range(10):
        sizes = rng.integers(2, 6, size=5)
        centers = rng.standard_normal((5, 6))
        centers *= 10.0 / min(np.linalg.norm(a - b) for i, a in enumerate(centers) for b in centers[i + 1:])
        truth = np.repeat(np.arange(5), sizes)
        feats = centers[truth] + rng.uniform(-0.5, 0.5, (truth.size, 6)) / math.sqrt(6)
        labels = layer_cluster(feats).assignments
        assert _same_partition(truth.tolist(), list(labels))
    merges = ward_linkage(np.array([[0.0], [1.0], [10.0], [11.0]]))
    assert [(a, b) for a, b, _, _ in merges] == [(0, 1), (2, 3), (4, 5)]
    assert [dist for _, _, dist, _ in merges] == [1.0, 1.0, pytest.approx(math.sqrt(200), abs=1e-12)]
    assert cut_tree(merges, 4, 2).tolist() == [1, 1, 2, 2]
    _detail(record_property, "10/10 planted 5-regime matrices recovered; {0,1,10,11} merges (0,1), (10,11), root")


# -- 11 ----------------------------------------------------------------------

@pytest.mark.criterion(11, "tri-context bookkeeping")
def test_c11_tricontext_replay(record_property):
    ctx = TriContext()
    full, text_cfg, img_cfg = [], [], []
    pos = 0
    steps = 0
    for cycle in range(10):
        for kind, n in (("text", 7), ("vae", 16)):
            block = Block(BlockKind(kind), pos, pos + n, cycle + 1)
            pos += n
            if kind == "text":
                ctx = ingest_text(ctx, block)
                text_cfg = list(full)
                full.append(block)
                img_cfg.append(block)
            else:
                ctx = ingest_image(ctx, block)
                full.append(block)
                text_cfg = list(full)
            ctx.check()
            assert (list(ctx.full), list(ctx.text_cfg), list(ctx.img_cfg)) == (full, text_cfg, img_cfg)
            steps += 1
    _detail(record_property, f"{steps} ingests over 10 cycles match the rule oracle exactly")


# -- 12 ----------------------------------------------------------------------

@pytest.mark.slow
@pytest.mark.criterion(12, "runtime scaling")
def test_c12_runtime_scaling(record_property):
    t0 = time.perf_counter()
    rows = cost_sweep(CostConfig(history_tokens=(25_000, 50_000, 100_000), repeats=5, k_img=4))
    elapsed = time.perf_counter() - t0
    by = {}
    for policy, c in rows:
        by.setdefault(policy, []).append((c.history_tokens, c.wall_clock))
    dense, curated = np.array(by["dense_kv"]), np.array(by["unilonggen"])
    speedup = dense[-1, 1] / curated[-1, 1]
    slope_dense = np.polyfit(dense[:, 0], dense[:, 1], 1)[0]
    slope_cur = np.polyfit(curated[:, 0], curated[:, 1], 1)[0]
    ratio = slope_cur / slope_dense
    _detail(record_property, f"speedup at {int(dense[-1, 0])} tokens {speedup:.1f}x (>= 5x); "
                             f"curated/dense slope {ratio:+.3f} (<= 0.05); {elapsed:.0f}s")
    assert speedup >= 5
    assert ratio <= 0.05
    assert elapsed < 300


# -- 13 ----------------------------------------------------------------------

@pytest.mark.criterion(13, "compression arithmetic")
def test_c13_compression(record_property):
    x = np.arange(1, 9, dtype=np.float64)
    assert compress_block(x, x, 4, "avgpool").keys.tolist() == [2.5, 6.5]
    assert compress_block(x, x, 4, "maxpool").keys.tolist() == [4.0, 8.0]
    # ramp 1..8 sampled at centers (j + 0.5) * 7 / 2 -> 1 + 1.75, 1 + 5.25
    assert compress_block(x, x, 4, "lerp").keys.tolist() == [2.75, 6.25]
    for n in range(1, 70):
        ramp = np.arange(n, dtype=np.float64) * 3.0 + 1.0
        for rate in (4, 8, 16):
            m = math.ceil(n / rate)
            for interp in ("avgpool", "maxpool", "lerp"):
                assert len(compress_block(ramp, ramp, rate, interp)) == m
            pos = (np.arange(m) + 0.5) * (n - 1) / m
            np.testing.assert_allclose(compress_block(ramp, ramp, rate, "lerp").keys, 1.0 + 3.0 * pos,
                                       rtol=0, atol=1e-12)
    _detail(record_property, "hand values exact; output length ceil(n/rate) for n < 70, rates 4/8/16, all interps")


# -- 14 ----------------------------------------------------------------------

def _cli_runs(tmp: Path, tag: str, inputs: dict) -> Path:
    out = tmp / tag
    args = {
        "probe": ["--dump", inputs["dump"], "--seq", inputs["seq"], "--config", inputs["config"]],
        "plan": ["--dump", inputs["dump"], "--seq", inputs["seq"], "--config", inputs["config"],
                 "--discard", '{"kind": "compress", "rate": 4, "interp": "lerp"}'],
        "evict": ["--dump", inputs["dump"], "--seq", inputs["seq"], "--config", inputs["config"]],
        "diagnose": ["--dump", inputs["dump"], "--seq", inputs["seq"], "--reference-turn", "1"],
        "simulate": ["--config", inputs["sweep"]],
        "ablate": ["--manifest", inputs["ablation"]],
        "cost": ["--config", inputs["cost"]],
    }
    for cmd, a in args.items():
        assert cli.main([cmd, *map(str, a), "--out-dir", str(out / cmd)]) == 0, cmd
    return out


def _cost_without_timing(path: Path) -> list[list[str]]:
    rows = [line.split(",") for line in path.read_text().splitlines()]
    col = rows[0].index("wall_clock_ms")
    return [r[:col] + r[col + 1:] for r in rows]


@pytest.mark.criterion(14, "determinism of command outputs")
def test_c14_determinism(tmp_path, record_property, monkeypatch):
    monkeypatch.delenv(cli.OUT_DIR_ENV, raising=False)
    from kvcurate.qkio import write_dump

    dump, seq = synthlab.generate(synthlab.preset("depth_specialized", m=6))
    inputs = {"dump": tmp_path / "d.qkd", "seq": tmp_path / "s.json", "config": tmp_path / "c.json",
              "sweep": tmp_path / "sweep.json", "ablation": tmp_path / "abl.json", "cost": tmp_path / "cost.json"}
    write_dump(dump, inputs["dump"])
    inputs["seq"].write_text(seq.dumps())
    inputs["config"].write_text(json.dumps(RunConfig(seed=7).to_json()))
    inputs["sweep"].write_text(json.dumps({"preset": "event_bottleneck", "synth": {"m": 6},
                                           "grid": {"tokens_per_image": [64, 128]}, "seeds": [0, 1]}))
    inputs["ablation"].write_text(json.dumps({
        "preset": "paper_matched", "synth": {"m": 8, "tokens_per_image": 32}, "seeds": [0], "slots": [4, 8],
        "run_config": {"ell_grd": 0, "ell_syn": 1},
        "rows": [{"id": "A1", "config": {"policy": "dense_kv"}}, {"id": "E", "config": {}}]}))
    inputs["cost"].write_text(json.dumps({"history_tokens": [6000, 12000], "repeats": 1, "warmup": 0}))
    a, b = _cli_runs(tmp_path, "a", inputs), _cli_runs(tmp_path, "b", inputs)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    compared, timing_only = 0, []
    for rel in files:
        if rel.parts[0] == "cost":
            if rel.name == "cost.csv":
                assert _cost_without_timing(a / rel) == _cost_without_timing(b / rel)
            else:
                ma, mb = (json.loads((x / rel).read_text()) for x in (a, b))
                ma["outputs"].pop("cost.csv"), mb["outputs"].pop("cost.csv")
                assert ma == mb
            timing_only.append(str(rel))
            continue
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel
        compared += 1
    _detail(record_property, f"{compared} report files byte-identical across reruns; cost files identical "
                             f"except measured wall_clock_ms")
    assert {rel.parts[0] for rel in files} == set(cli.COMMANDS)
    assert compared == len(files) - len(timing_only)
