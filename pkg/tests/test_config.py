import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from kvcurate.config import (Compress, ConfigError, DenseKv, Drop, GroupedToken, MeanVae, RunConfig,
                             SemanticOracle, SingleProbe, SlidingWindow, SpecialToken, TextBlockMatch, TokenLevel,
                             UniLongGen, config_from_json, load_config, policy_from_json, policy_to_json)


def test_defaults():
    cfg = RunConfig()
    assert (cfg.ell_grd, cfg.ell_syn, cfg.k_grd, cfg.k_img) == (1, 15, 4, 4)
    assert cfg.policy == UniLongGen() and cfg.discard == Drop() and cfg.query_anchor == MeanVae()
    assert cfg.split_layer == 15


def test_split_override():
    assert RunConfig(policy=UniLongGen(split_layer=9)).split_layer == 9


POLICIES = [DenseKv(), SlidingWindow(8), UniLongGen(3), SingleProbe("vit", 2), TokenLevel(12),
            GroupedToken(32, 4), SemanticOracle.from_mapping({"1": 2, "2": 1}), TextBlockMatch(3, 0)]


@pytest.mark.parametrize("policy", POLICIES)
def test_policy_json_round_trip(policy):
    assert policy_from_json(json.loads(json.dumps(policy_to_json(policy)))) == policy


@pytest.mark.parametrize("discard", [Drop(), Compress(8, "lerp"), Compress(16, "maxpool")])
@pytest.mark.parametrize("anchor", [MeanVae(), SpecialToken(), SpecialToken(5)])
def test_run_config_round_trip(discard, anchor, tmp_path):
    cfg = RunConfig(ell_grd=2, ell_syn=9, k_img=6, discard=discard, query_anchor=anchor,
                    score_mode="post_softmax", seed=2**64 - 1)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_json()))
    assert load_config(path) == cfg


@pytest.mark.parametrize("obj", [
    {"ell_grd": 1, "bogus": 0},
    {"policy": {"variant": "dense_kv", "n": 3}},
    {"policy": {"variant": "nope"}},
    {"discard": {"kind": "compress", "rate": 5}},
    {"discard": {"kind": "compress", "interp": "cubic"}},
    {"discard": {"kind": "drop", "rate": 4}},
    {"query_anchor": {"kind": "cls"}},
    {"ell_grd": 15, "ell_syn": 15},
    {"k_img": 0},
    {"ell_grd": "1"},
    {"seed": -1},
    {"score_mode": "mixed"},
    {"policy": {"variant": "grouped_token", "group_size": 16}},
    {"policy": {"variant": "semantic_oracle", "labels": {"1": 1, "2": 1}}},
    {"policy": {"variant": "sliding_window", "n": 0}},
])
def test_strict_rejection(obj):
    with pytest.raises(ConfigError):
        config_from_json(obj)


def test_invalid_json_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)


@given(st.integers(0, 30), st.integers(1, 31), st.integers(1, 20), st.integers(1, 20),
       st.sampled_from(POLICIES), st.integers(0, 2**64 - 1))
def test_any_valid_config_round_trips(a, gap, kg, ki, policy, seed):
    cfg = RunConfig(ell_grd=a, ell_syn=a + gap, k_grd=kg, k_img=ki, policy=policy, seed=seed)
    assert config_from_json(json.loads(json.dumps(cfg.to_json()))) == cfg
