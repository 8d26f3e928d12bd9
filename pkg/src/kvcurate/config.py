"""Run configuration and policy descriptors, with strict JSON loading."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Union

from .sequence import BlockKind


class ConfigError(ValueError):
    pass


COMPRESS_RATES = (4, 8, 16)
GROUP_SIZES = (8, 32, 128)
INTERPS = ("avgpool", "maxpool", "lerp")


# -- discard handling ------------------------------------------------------

@dataclass(frozen=True)
class Drop:
    pass


@dataclass(frozen=True)
class Compress:
    rate: int = 4
    interp: str = "avgpool"

    def __post_init__(self):
        if self.rate not in COMPRESS_RATES:
            raise ConfigError(f"compress rate must be one of {COMPRESS_RATES}, got {self.rate}")
        if self.interp not in INTERPS:
            raise ConfigError(f"interp must be one of {INTERPS}, got {self.interp!r}")


Discard = Union[Drop, Compress]


# -- query anchors ---------------------------------------------------------

@dataclass(frozen=True)
class MeanVae:
    pass


@dataclass(frozen=True)
class SpecialToken:
    # None: the image-start special block immediately preceding the current image
    index: int | None = None


QueryAnchor = Union[MeanVae, SpecialToken]


# -- policy variants -------------------------------------------------------

@dataclass(frozen=True)
class DenseKv:
    pass


@dataclass(frozen=True)
class SlidingWindow:
    n: int = 4

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("sliding window needs n >= 1")


@dataclass(frozen=True)
class UniLongGen:
    # layer where visibility switches from text to image history; None couples it to ell_syn
    split_layer: int | None = None


@dataclass(frozen=True)
class SingleProbe:
    kind: str = "text"
    layer: int = 1

    def __post_init__(self):
        BlockKind.parse(self.kind)


@dataclass(frozen=True)
class TokenLevel:
    budget: int = 4

    def __post_init__(self):
        if self.budget < 1:
            raise ConfigError("token budget must be >= 1 image-equivalent")


@dataclass(frozen=True)
class GroupedToken:
    group_size: int = 8
    budget: int = 4

    def __post_init__(self):
        if self.group_size not in GROUP_SIZES:
            raise ConfigError(f"group_size must be one of {GROUP_SIZES}")
        if self.budget < 1:
            raise ConfigError("token budget must be >= 1 image-equivalent")


@dataclass(frozen=True)
class SemanticOracle:
    labels: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        ranks = [r for _, r in self.labels]
        if len(set(ranks)) != len(ranks):
            raise ConfigError("semantic oracle labels contain duplicate ranks")
        turns = [t for t, _ in self.labels]
        if len(set(turns)) != len(turns):
            raise ConfigError("semantic oracle labels contain duplicate turns")

    @classmethod
    def from_mapping(cls, labels: dict) -> "SemanticOracle":
        return cls(tuple(sorted((int(t), int(r)) for t, r in labels.items())))

    def as_dict(self) -> dict[int, int]:
        return dict(self.labels)


@dataclass(frozen=True)
class TextBlockMatch:
    k: int = 4
    layer: int = 1


PolicyVariant = Union[DenseKv, SlidingWindow, UniLongGen, SingleProbe, TokenLevel,
                      GroupedToken, SemanticOracle, TextBlockMatch]

_VARIANTS = {
    "dense_kv": DenseKv,
    "sliding_window": SlidingWindow,
    "unilonggen": UniLongGen,
    "single_probe": SingleProbe,
    "token_level": TokenLevel,
    "grouped_token": GroupedToken,
    "semantic_oracle": SemanticOracle,
    "text_block_match": TextBlockMatch,
}
_VARIANT_NAMES = {v: k for k, v in _VARIANTS.items()}


def variant_name(v: PolicyVariant) -> str:
    return _VARIANT_NAMES[type(v)]


# -- run config ------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    ell_grd: int = 1
    ell_syn: int = 15
    k_grd: int = 4
    k_img: int = 4
    policy: PolicyVariant = field(default_factory=UniLongGen)
    discard: Discard = field(default_factory=Drop)
    query_anchor: QueryAnchor = field(default_factory=MeanVae)
    score_mode: str = "pre_softmax"
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.ell_grd < self.ell_syn:
            raise ConfigError(f"need 0 <= ell_grd < ell_syn, got {self.ell_grd}, {self.ell_syn}")
        if self.k_grd < 1 or self.k_img < 1:
            raise ConfigError("k_grd and k_img must be >= 1")
        if self.score_mode not in ("pre_softmax", "post_softmax"):
            raise ConfigError(f"unknown score_mode {self.score_mode!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")

    @property
    def split_layer(self) -> int:
        if isinstance(self.policy, UniLongGen) and self.policy.split_layer is not None:
            return self.policy.split_layer
        return self.ell_syn

    def to_json(self) -> dict:
        return {
            "ell_grd": self.ell_grd,
            "ell_syn": self.ell_syn,
            "k_grd": self.k_grd,
            "k_img": self.k_img,
            "policy": policy_to_json(self.policy),
            "discard": discard_to_json(self.discard),
            "query_anchor": anchor_to_json(self.query_anchor),
            "score_mode": self.score_mode,
            "seed": self.seed,
        }


def policy_to_json(v: PolicyVariant) -> dict:
    out = {"variant": variant_name(v)}
    if isinstance(v, SemanticOracle):
        out["labels"] = {str(t): r for t, r in v.labels}
    else:
        out.update(asdict(v))
    return out


def discard_to_json(d: Discard) -> dict:
    if isinstance(d, Drop):
        return {"kind": "drop"}
    return {"kind": "compress", "rate": d.rate, "interp": d.interp}


def anchor_to_json(a: QueryAnchor) -> dict:
    if isinstance(a, MeanVae):
        return {"kind": "mean_vae"}
    return {"kind": "special_token", "index": a.index}


def _strict(obj: Any, allowed: set[str], what: str) -> dict:
    if not isinstance(obj, dict):
        raise ConfigError(f"{what} must be a JSON object")
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown {what} field(s): {sorted(unknown)}")
    return obj


def policy_from_json(obj: Any) -> PolicyVariant:
    if isinstance(obj, str):
        obj = {"variant": obj}
    if not isinstance(obj, dict) or "variant" not in obj:
        raise ConfigError("policy must be an object with a 'variant' field")
    name = obj["variant"]
    if name not in _VARIANTS:
        raise ConfigError(f"unknown policy variant {name!r}")
    cls = _VARIANTS[name]
    params = {k: v for k, v in obj.items() if k != "variant"}
    _strict(params, {f.name for f in fields(cls)}, f"policy '{name}'")
    if cls is SemanticOracle:
        return SemanticOracle.from_mapping(params.get("labels", {}))
    try:
        return cls(**params)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def discard_from_json(obj: Any) -> Discard:
    obj = _strict(obj, {"kind", "rate", "interp"}, "discard")
    kind = obj.get("kind", "drop")
    if kind == "drop":
        if set(obj) - {"kind"}:
            raise ConfigError("drop takes no parameters")
        return Drop()
    if kind == "compress":
        return Compress(int(obj.get("rate", 4)), str(obj.get("interp", "avgpool")).lower())
    raise ConfigError(f"unknown discard kind {kind!r}")


def anchor_from_json(obj: Any) -> QueryAnchor:
    obj = _strict(obj, {"kind", "index"}, "query_anchor")
    kind = obj.get("kind", "mean_vae")
    if kind == "mean_vae":
        return MeanVae()
    if kind == "special_token":
        idx = obj.get("index")
        return SpecialToken(None if idx is None else int(idx))
    raise ConfigError(f"unknown query_anchor kind {kind!r}")


def config_from_json(obj: dict) -> RunConfig:
    _strict(obj, {f.name for f in fields(RunConfig)}, "RunConfig")
    kw = {k: obj[k] for k in ("ell_grd", "ell_syn", "k_grd", "k_img", "score_mode", "seed") if k in obj}
    if "policy" in obj:
        kw["policy"] = policy_from_json(obj["policy"])
    if "discard" in obj:
        kw["discard"] = discard_from_json(obj["discard"])
    if "query_anchor" in obj:
        kw["query_anchor"] = anchor_from_json(obj["query_anchor"])
    for k in ("ell_grd", "ell_syn", "k_grd", "k_img", "seed"):
        if k in kw and (not isinstance(kw[k], int) or isinstance(kw[k], bool)):
            raise ConfigError(f"{k} must be an integer")
    return RunConfig(**kw)


def load_config(path) -> RunConfig:
    with open(path) as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON in {path}: {e}") from None
    return config_from_json(obj)
