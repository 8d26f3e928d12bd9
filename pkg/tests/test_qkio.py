import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvcurate.qkio import (_HEADER, MAGIC, SENTINEL, DumpCorruptionError, DumpFormatError, DumpValidationError, QkDump,
                           dump_from_bytes, read_dump, write_dump)


def seeded(L=2, N=64, H=4, d=16, seed=0):
    rng = np.random.default_rng(seed)
    return QkDump(rng.standard_normal((L, N, H, d)), rng.standard_normal((L, N, H, d)))


def test_round_trip_is_byte_identical(tmp_path):
    dump = seeded()
    path = tmp_path / "x.qkd"
    write_dump(dump, path)
    raw = path.read_bytes()
    back = read_dump(path)
    assert back == dump
    assert back.to_bytes() == raw
    assert (back.layers, back.num_tokens, back.heads, back.head_dim) == (2, 64, 4, 16)
    assert len(raw) == _HEADER.size + 2 * 2 * 64 * 4 * 16 * 4


def test_layout_is_q_then_k_per_layer():
    dump = seeded(L=2, N=3, H=1, d=2)
    body = np.frombuffer(dump.to_bytes()[_HEADER.size:], dtype="<f4").reshape(2, 2, 3, 1, 2)
    np.testing.assert_array_equal(body[1, 0], dump.queries[1])
    np.testing.assert_array_equal(body[1, 1], dump.keys[1])


def header(L=1, H=1, d=1, N=1, magic=MAGIC, version=1, sentinel=SENTINEL, fmt="<4sHIIIIQ"):
    return struct.pack(fmt, magic, version, sentinel, L, H, d, N)


def test_zero_tokens_rejected():
    with pytest.raises(DumpFormatError, match="degenerate"):
        dump_from_bytes(header(N=0))


@pytest.mark.parametrize("kw, match", [
    ({"magic": b"QKDX"}, "magic"),
    ({"version": 2}, "version"),
    ({"fmt": ">4sHIIIIQ"}, "sentinel"),
])
def test_bad_header(kw, match):
    with pytest.raises(DumpFormatError, match=match):
        dump_from_bytes(header(**kw) + b"\0" * 8)


def test_truncation_reports_offset():
    raw = seeded(L=2, N=8, H=2, d=4).to_bytes()
    block = 8 * 2 * 4 * 4
    cut = _HEADER.size + 2 * block + block // 2  # inside layer 1's Q block
    with pytest.raises(DumpCorruptionError, match="layer 1 Q") as e:
        dump_from_bytes(raw[:cut])
    assert e.value.offset == cut
    with pytest.raises(DumpCorruptionError):
        dump_from_bytes(raw[:20])
    with pytest.raises(DumpCorruptionError, match="trailing"):
        dump_from_bytes(raw + b"\0")


def test_non_finite_rejected(tmp_path):
    q = np.zeros((1, 2, 1, 2))
    k = q.copy()
    k[0, 1, 0, 1] = np.nan
    with pytest.raises(DumpValidationError):
        write_dump(QkDump(q, k), tmp_path / "bad.qkd")
    raw = bytearray(QkDump(q, q).to_bytes())
    raw[-4:] = np.array([np.inf], dtype="<f4").tobytes()
    with pytest.raises(DumpValidationError):
        dump_from_bytes(bytes(raw))


def test_shape_mismatch_rejected():
    with pytest.raises(DumpValidationError):
        QkDump(np.zeros((1, 2, 1, 2)), np.zeros((1, 3, 1, 2)))


def test_arrays_are_read_only():
    dump = seeded()
    with pytest.raises(ValueError):
        dump.keys[0, 0, 0, 0] = 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 9), st.integers(1, 3), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_round_trip_any_shape(L, N, H, d, seed):
    dump = seeded(L, N, H, d, seed)
    raw = dump.to_bytes()
    assert dump_from_bytes(raw).to_bytes() == raw
    assert seeded(L, N, H, d, seed).to_bytes() == raw


def test_take_tokens():
    dump = seeded(N=10)
    sub = dump.take_tokens(np.array([1, 3]))
    np.testing.assert_array_equal(sub.keys, dump.keys[:, [1, 3]])
