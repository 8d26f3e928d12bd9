import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from helpers import random_dump, simple_layout
from kvcurate import synthlab
from kvcurate.diagnostics import (AttentionSlice, DiagnosticsError, attention_entropy, coverage_and_gini,
                                  coverage_curve, cut_tree, diagnose, gini, hist_vs_current, key_reference_mass,
                                  layer_cluster, modality_ratios, slice_from_dump, text_vae_correlation,
                                  ward_linkage)

hierarchy = pytest.importorskip("scipy.cluster.hierarchy")

prob_rows = hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 30)),
                       elements=st.floats(0.01, 10)).map(lambda w: w / w.sum(axis=1, keepdims=True))


def test_entropy_examples():
    assert attention_entropy(AttentionSlice(np.full(4, 0.25))) == pytest.approx(math.log(4))
    assert attention_entropy(AttentionSlice(np.full(4, 0.25)), normalized=True) == pytest.approx(1.0)
    assert attention_entropy(AttentionSlice([0.0, 1.0, 0.0])) == 0.0
    with pytest.raises(DiagnosticsError):
        attention_entropy(AttentionSlice([0.5, 0.6]))
    with pytest.raises(DiagnosticsError):
        attention_entropy(AttentionSlice([1.5, -0.5]))


@settings(max_examples=80, deadline=None)
@given(prob_rows)
def test_entropy_bounded_by_uniform(w):
    n = w.shape[1]
    h = attention_entropy(AttentionSlice(w))
    assert -1e-12 <= h <= math.log(n) + 1e-9
    if np.allclose(w, 1 / n):
        assert h == pytest.approx(math.log(n))
    elif h > math.log(n) - 1e-12:
        pytest.fail("non-uniform rows reached the maximum")


def test_gini_examples():
    assert gini(np.array([0, 0, 0, 1.0])) == pytest.approx(3 / 4)
    assert gini(np.full(7, 1 / 7)) == pytest.approx(0.0, abs=1e-15)
    assert gini(np.zeros(3)) == 0.0
    c = coverage_and_gini(AttentionSlice(np.full(10, 0.1)), (10, 50, 100))
    assert c.coverage == (0.1, 0.5, 1.0)
    with pytest.raises(DiagnosticsError):
        coverage_and_gini(AttentionSlice(np.full(10, 0.1)), (0,))


@settings(max_examples=80, deadline=None)
@given(prob_rows, st.randoms(use_true_random=False))
def test_concentration_properties(w, rnd):
    perm = list(range(w.shape[1]))
    rnd.shuffle(perm)
    a = coverage_and_gini(AttentionSlice(w))
    b = coverage_and_gini(AttentionSlice(w[:, perm]))
    assert a.gini == pytest.approx(b.gini, abs=1e-12)
    assert 0 <= a.gini <= 1
    curve = coverage_curve(AttentionSlice(w))
    gains = np.diff(np.concatenate([[0.0], curve]))
    assert (np.diff(gains) <= 1e-12).all()
    assert curve[-1] == pytest.approx(1.0)
    assert all(x <= y + 1e-12 for x, y in zip(a.coverage, a.coverage[1:]))


def test_key_reference_mass():
    seq = simple_layout(3, text=2, vae=2, cur_text=1, cur_vae=1)
    cols = np.arange(seq.history_end)
    w = np.zeros(len(cols))
    w[seq.turn(2).vae_block.start] = 0.3
    w[seq.turn(3).vae_block.start] = 0.1
    w[0] = 0.6
    sl = AttentionSlice(w, columns=cols)
    shares = [key_reference_mass(sl, seq, t) for t in (1, 2, 3)]
    assert shares == pytest.approx([0.0, 0.75, 0.25]) and sum(shares) == pytest.approx(1.0)
    assert key_reference_mass(AttentionSlice(np.eye(len(cols))[0], columns=cols), seq, 1) is None


def test_modality_ratios_and_history_share():
    seq = simple_layout(2, text=2, vae=2, cur_text=2, cur_vae=2)
    vae_cols = np.array([2, 3, 6, 7])
    sl = AttentionSlice(np.full(4, 0.25), layer=3, columns=vae_cols)
    r = modality_ratios(sl, seq)
    assert r[3]["vae"] == 1.0 and sum(r[3].values()) == pytest.approx(1.0)
    dump = random_dump(seq, layers=2)
    full = slice_from_dump(dump, 1, seq.current_vae.indices, np.arange(seq.total_tokens))
    assert sum(modality_ratios([full], seq)[1].values()) == pytest.approx(1.0)
    hv = hist_vs_current([full], seq)[0]
    assert hv["history"] + hv["current"] == pytest.approx(1.0)
    with pytest.raises(DiagnosticsError):
        modality_ratios(AttentionSlice([1.0], columns=np.array([99])), seq)


def test_text_vae_correlation():
    ratios = {l: {"text": t, "vae": 1 - t} for l, t in enumerate([0.1, 0.4, 0.2, 0.9])}
    assert text_vae_correlation(ratios) == pytest.approx(-1.0)
    assert text_vae_correlation({l: {"text": 0.5, "vae": 0.5} for l in range(4)}) is None
    with pytest.raises(DiagnosticsError):
        text_vae_correlation({0: {"text": 0.1, "vae": 0.2}, 1: {"text": 0.3, "vae": 0.1}})


@pytest.mark.parametrize("seed", range(8))
def test_ward_matches_scipy(seed):
    x = np.random.default_rng(seed).standard_normal((14, 3))
    ours = np.array([m[2:] for m in ward_linkage(x)], dtype=float)
    ref = hierarchy.linkage(x, method="ward")
    assert np.allclose(ours[:, 0], ref[:, 2]) and (ours[:, 1] == ref[:, 3]).all()
    assert [tuple(sorted(m[:2])) for m in ward_linkage(x)] == [tuple(sorted(map(int, r[:2]))) for r in ref]
    for k in (2, 3, 5):
        a = cut_tree(ward_linkage(x), 14, k)
        b = hierarchy.cut_tree(ref, n_clusters=k).ravel()
        assert len({(i, j) for i, j in zip(a, b)}) == k


def test_ward_singletons_and_permutation():
    x = np.random.default_rng(1).standard_normal((5, 2))
    assert sorted(cut_tree(ward_linkage(x), 5, 5).tolist()) == [1, 2, 3, 4, 5]
    perm = np.random.default_rng(2).permutation(9)
    y = np.random.default_rng(3).standard_normal((9, 4))
    a = cut_tree(ward_linkage(y), 9, 3)
    b = cut_tree(ward_linkage(y[perm]), 9, 3)
    assert len({(int(a[p]), int(b[i])) for i, p in enumerate(perm)}) == 3
    with pytest.raises(DiagnosticsError):
        layer_cluster(y[:3])


def test_depth_specialized_anticorrelation():
    dump, seq = synthlab.generate(synthlab.preset("depth_specialized"))
    rep = diagnose(dump, seq)
    assert rep.text_vae_correlation is not None and rep.text_vae_correlation <= -0.8
    text = [rep.modality_ratios[l]["text"] for l in range(dump.layers)]
    vae = [rep.modality_ratios[l]["vae"] for l in range(dump.layers)]
    assert text[0] > vae[0] and vae[-1] > text[-1]
    assert len(rep.cluster_assignments) == dump.layers


def test_report_csvs_have_headers():
    dump, seq = synthlab.generate(synthlab.SynthConfig(m=4, layers=5, tokens_per_image=8, tokens_per_text=4))
    rep = diagnose(dump, seq, reference_turn=1)
    csvs = rep.figure_csvs()
    assert len(csvs) == 7
    assert csvs["fig4_entropy.csv"].splitlines()[0] == "images,context_tokens,entropy"
    assert len(csvs["fig4_entropy.csv"].splitlines()) == seq.m + 2
    assert len(rep.key_reference_mass) == seq.m
    assert set(rep.to_json()) >= {"gini", "coverage_curve", "cluster_assignments", "metadata"}
