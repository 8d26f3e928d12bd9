"""Binary ``.qkd`` format for per-layer query/key tensors.

Layout (little-endian throughout)::

    magic     4s   b"QKDP"
    version   u16  1
    sentinel  u32  0x0A0B0C0D   (reads back differently under the wrong byte order)
    layers    u32
    heads     u32
    head_dim  u32
    tokens    u64
    then for each layer: Q block, K block, each tokens*heads*head_dim float32,
    row-major token-major.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .config import ConfigError, RunConfig, load_config  # noqa: F401  (re-exported)

MAGIC = b"QKDP"
VERSION = 1
SENTINEL = 0x0A0B0C0D
_HEADER = struct.Struct("<4sHIIIIQ")
_F32 = np.dtype("<f4")


class DumpError(ValueError):
    pass


class DumpFormatError(DumpError):
    pass


class DumpCorruptionError(DumpError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte offset {offset})")
        self.offset = offset


class DumpValidationError(DumpError):
    pass


@dataclass(frozen=True, eq=False)
class QkDump:
    """Queries and keys of shape ``[layers, tokens, heads, head_dim]`` (float32)."""

    queries: np.ndarray
    keys: np.ndarray

    def __post_init__(self):
        q = np.ascontiguousarray(self.queries, dtype=_F32)
        k = np.ascontiguousarray(self.keys, dtype=_F32)
        if q.ndim != 4 or q.shape != k.shape:
            raise DumpValidationError(f"queries {q.shape} and keys {k.shape} must share a 4-d shape")
        if min(q.shape) < 1:
            raise DumpValidationError(f"all dimensions must be positive, got {q.shape}")
        q.setflags(write=False)
        k.setflags(write=False)
        object.__setattr__(self, "queries", q)
        object.__setattr__(self, "keys", k)

    @property
    def layers(self) -> int:
        return self.queries.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.queries.shape[1]

    @property
    def heads(self) -> int:
        return self.queries.shape[2]

    @property
    def head_dim(self) -> int:
        return self.queries.shape[3]

    def validate(self) -> None:
        for name, arr in (("queries", self.queries), ("keys", self.keys)):
            if not np.isfinite(arr).all():
                raise DumpValidationError(f"{name} contain NaN or Inf")

    def take_tokens(self, rows: np.ndarray) -> "QkDump":
        return QkDump(self.queries[:, rows], self.keys[:, rows])

    def to_bytes(self) -> bytes:
        self.validate()
        L, N, H, d = self.queries.shape
        parts = [_HEADER.pack(MAGIC, VERSION, SENTINEL, L, H, d, N)]
        for layer in range(L):
            parts.append(self.queries[layer].tobytes())
            parts.append(self.keys[layer].tobytes())
        return b"".join(parts)

    def __eq__(self, other):
        if not isinstance(other, QkDump):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()


def write_dump(dump: QkDump, path) -> None:
    data = dump.to_bytes()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def dump_from_bytes(data: bytes) -> QkDump:
    if len(data) < _HEADER.size:
        raise DumpCorruptionError(f"header truncated: {len(data)} of {_HEADER.size} bytes", len(data))
    magic, version, sentinel, L, H, d, N = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise DumpFormatError(f"bad magic {magic!r}")
    if sentinel != SENTINEL:
        raise DumpFormatError(f"endianness sentinel mismatch: {sentinel:#010x}")
    if version != VERSION:
        raise DumpFormatError(f"unsupported version {version}")
    if min(L, H, d, N) == 0:
        raise DumpFormatError(f"degenerate header: layers={L} heads={H} head_dim={d} tokens={N}")
    block = N * H * d * _F32.itemsize
    expected = _HEADER.size + 2 * L * block
    if len(data) < expected:
        # locate the first tensor the file ends inside
        off = len(data) - _HEADER.size
        layer, rem = divmod(off, 2 * block)
        which = "Q" if rem < block else "K"
        raise DumpCorruptionError(
            f"file truncated inside layer {layer} {which} block: {len(data)} of {expected} bytes",
            len(data))
    if len(data) > expected:
        raise DumpCorruptionError(f"{len(data) - expected} trailing bytes after last tensor", expected)
    body = np.frombuffer(data, dtype=_F32, offset=_HEADER.size).reshape(L, 2, N, H, d)
    dump = QkDump(body[:, 0].copy(), body[:, 1].copy())
    dump.validate()
    return dump


def read_dump(path) -> QkDump:
    with open(path, "rb") as f:
        return dump_from_bytes(f.read())
