"""Interleaved multimodal sequences as turns of typed token blocks.

Turn indices are 1-based: turn 1 is the first history turn. Turn 0 is reserved
for preamble special tokens (e.g. ``<bos>``) that belong to no turn. The turn
carrying the final VAE block is the *current* turn, i.e. the image being
generated; everything before its first block is history.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

PREAMBLE_TURN = 0


class SequenceError(ValueError):
    pass


class LayoutError(SequenceError):
    """Token ranges are empty, overlapping or leave gaps."""


class StructureError(SequenceError):
    """Blocks are well laid out but do not form a valid turn structure."""


class TurnLookupError(KeyError):
    pass


class BlockKind(str, enum.Enum):
    TEXT = "text"
    VIT = "vit"
    VAE = "vae"
    SPECIAL = "special"

    @classmethod
    def parse(cls, value: "BlockKind | str") -> "BlockKind":
        if isinstance(value, BlockKind):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise StructureError(f"unknown block kind {value!r}") from None


KIND_ORDER = (BlockKind.TEXT, BlockKind.VIT, BlockKind.VAE, BlockKind.SPECIAL)


@dataclass(frozen=True)
class Block:
    kind: BlockKind
    start: int
    stop: int
    turn: int

    def __post_init__(self):
        if self.start < 0 or self.stop <= self.start:
            raise LayoutError(f"empty or negative token range [{self.start}, {self.stop})")

    def __len__(self) -> int:
        return self.stop - self.start

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.start, self.stop, dtype=np.int64)


@dataclass(frozen=True)
class Turn:
    index: int
    text_block: Block | None = None
    vit_block: Block | None = None
    vae_block: Block | None = None
    special_blocks: tuple[Block, ...] = ()

    def block(self, kind: BlockKind) -> Block | None:
        kind = BlockKind.parse(kind)
        if kind is BlockKind.TEXT:
            return self.text_block
        if kind is BlockKind.VIT:
            return self.vit_block
        if kind is BlockKind.VAE:
            return self.vae_block
        return None

    def blocks(self, kind: BlockKind) -> tuple[Block, ...]:
        kind = BlockKind.parse(kind)
        if kind is BlockKind.SPECIAL:
            return self.special_blocks
        b = self.block(kind)
        return () if b is None else (b,)

    @property
    def start(self) -> int:
        return min(b.start for b in self.all_blocks())

    def all_blocks(self) -> tuple[Block, ...]:
        out = [b for b in (self.text_block, self.vit_block, self.vae_block) if b is not None]
        out.extend(self.special_blocks)
        return tuple(sorted(out, key=lambda b: b.start))


@dataclass(frozen=True)
class InterleavedSequence:
    """Immutable layout of a serialized interleaved sequence.

    ``turns`` holds the history turns only; the current turn (whose VAE block
    is ``current_vae``) is kept separately in ``current``.
    """

    blocks: tuple[Block, ...]
    turns: tuple[Turn, ...]
    current: Turn
    preamble: tuple[Block, ...] = ()
    _by_index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_by_index", {t.index: t for t in self.turns})

    @property
    def current_vae(self) -> Block:
        return self.current.vae_block

    @property
    def total_tokens(self) -> int:
        return sum(len(b) for b in self.blocks)

    @property
    def m(self) -> int:
        return len(self.turns)

    @property
    def turn_indices(self) -> tuple[int, ...]:
        return tuple(t.index for t in self.turns)

    @property
    def history_end(self) -> int:
        """First token index of the current turn; history is ``[0, history_end)``."""
        return self.current.start

    def turn(self, index: int) -> Turn:
        try:
            return self._by_index[index]
        except KeyError:
            raise TurnLookupError(f"no history turn {index}") from None

    def tokens_of(self, turn_set: Iterable[int], kind: BlockKind | str) -> np.ndarray:
        """Ascending token indices of all ``kind`` blocks in the given history turns."""
        kind = BlockKind.parse(kind)
        parts = []
        for i in sorted(set(turn_set)):
            for b in self.turn(i).blocks(kind):
                parts.append(b.indices)
        if not parts:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate(parts))

    def history_blocks(self, kind: BlockKind | str | None = None) -> list[Block]:
        out = [b for b in self.blocks if b.stop <= self.history_end]
        if kind is not None:
            kind = BlockKind.parse(kind)
            out = [b for b in out if b.kind is kind]
        return out

    def kind_array(self) -> np.ndarray:
        """Per-token kind code, indexing into ``KIND_ORDER``."""
        codes = np.empty(self.total_tokens, dtype=np.int8)
        for b in self.blocks:
            codes[b.start:b.stop] = KIND_ORDER.index(b.kind)
        return codes

    def turn_array(self) -> np.ndarray:
        turns = np.empty(self.total_tokens, dtype=np.int64)
        for b in self.blocks:
            turns[b.start:b.stop] = b.turn
        return turns

    def to_json(self) -> list[dict]:
        return [
            {"turn": b.turn, "kind": b.kind.value, "start": b.start, "len": len(b)}
            for b in self.blocks
        ]

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1)


def build_sequence(spec: Sequence[tuple[int, BlockKind | str, int]]) -> InterleavedSequence:
    """Lay out ``(turn, kind, length)`` entries contiguously from token 0.

    The last entry must be the VAE block of the current image.
    """
    blocks = []
    pos = 0
    for turn, kind, length in spec:
        length = int(length)
        if length <= 0:
            raise LayoutError(f"block ({turn}, {kind}) has non-positive length {length}")
        blocks.append(Block(BlockKind.parse(kind), pos, pos + length, int(turn)))
        pos += length
    return _assemble(blocks)


def sequence_from_json(entries: list[dict] | str) -> InterleavedSequence:
    if isinstance(entries, str):
        entries = json.loads(entries)
    if not isinstance(entries, list):
        raise StructureError("sequence sidecar must be a JSON array")
    blocks = []
    for e in entries:
        if set(e) != {"turn", "kind", "start", "len"}:
            raise StructureError(f"sidecar entry has fields {sorted(e)}, expected turn/kind/start/len")
        blocks.append(Block(BlockKind.parse(e["kind"]), int(e["start"]),
                            int(e["start"]) + int(e["len"]), int(e["turn"])))
    blocks.sort(key=lambda b: b.start)
    pos = 0
    for b in blocks:
        if b.start != pos:
            what = "overlap" if b.start < pos else "gap"
            raise LayoutError(f"{what} at token {min(b.start, pos)}")
        pos = b.stop
    return _assemble(blocks)


def load_sequence(path) -> InterleavedSequence:
    with open(path) as f:
        return sequence_from_json(json.load(f))


def _assemble(blocks: list[Block]) -> InterleavedSequence:
    if not blocks or blocks[-1].kind is not BlockKind.VAE:
        raise StructureError("missing current image: the last block must be a VAE block")
    cur_turn = blocks[-1].turn
    preamble: list[Block] = []
    grouped: dict[int, list[Block]] = {}
    last_turn = PREAMBLE_TURN
    for b in blocks:
        if b.turn < last_turn:
            raise StructureError(f"turn {b.turn} block at token {b.start} follows turn {last_turn}")
        last_turn = b.turn
        if b.turn == PREAMBLE_TURN and b.turn != cur_turn:
            if b.kind is not BlockKind.SPECIAL:
                raise StructureError("turn 0 is reserved for preamble special blocks")
            preamble.append(b)
            continue
        grouped.setdefault(b.turn, []).append(b)

    turns = {i: _make_turn(i, bs) for i, bs in grouped.items()}
    current = turns.pop(cur_turn)
    if current.vae_block is not blocks[-1]:
        raise StructureError("current turn declares more than one VAE block")
    history = tuple(turns[i] for i in sorted(turns))
    return InterleavedSequence(tuple(blocks), history, current, tuple(preamble))


def _make_turn(index: int, blocks: list[Block]) -> Turn:
    slots: dict[BlockKind, Block] = {}
    specials = []
    for b in blocks:
        if b.kind is BlockKind.SPECIAL:
            specials.append(b)
        elif b.kind in slots:
            raise StructureError(f"turn {index} has two {b.kind.value} blocks")
        else:
            slots[b.kind] = b
    return Turn(index, slots.get(BlockKind.TEXT), slots.get(BlockKind.VIT),
                slots.get(BlockKind.VAE), tuple(specials))
