import json
import struct

import numpy as np
import pytest

from entroprune.linalg import ShapeError
from entroprune.weights import (
    ArchiveIntegrityError,
    ArchiveParseError,
    TensorNotFoundError,
    encode_archive,
    get_tensor,
    load_archive,
    save_archive,
    store_archive,
)


def handmade(entries, payload: bytes) -> bytes:
    """Independent writer: magic, u64 header length, JSON header, payload."""
    header = json.dumps(entries).encode()
    return b"ENTPRUN1" + struct.pack("<Q", len(header)) + header + payload


def test_round_trip_2x2(tmp_path):
    path = tmp_path / "a.entp"
    save_archive(path, {"w": np.array([[1, 2], [3, 4]], dtype=np.float32)})
    arc = load_archive(path)
    np.testing.assert_array_equal(get_tensor(arc, "w", [2, 2]), [[1, 2], [3, 4]])
    out = tmp_path / "b.entp"
    store_archive(arc, out)
    assert out.read_bytes() == path.read_bytes()


def test_store_load_byte_identical_for_handmade_archive(tmp_path):
    # non-canonical header formatting and trailing padding must survive
    payload = struct.pack("<3f", 1.5, -2.0, 0.25) + b"\0" * 52 + struct.pack("<f", 7.0)
    data = handmade(
        {"b": {"nbytes": 4, "offset": 64, "shape": [1], "dtype": "f32"}, "a": {"dtype": "f32", "shape": [3], "offset": 0, "nbytes": 12}},
        payload + b"\0" * 5,
    )
    src = tmp_path / "h.entp"
    src.write_bytes(data)
    arc = load_archive(src)
    np.testing.assert_array_equal(get_tensor(arc, "a", [3]), [1.5, -2.0, 0.25])
    np.testing.assert_array_equal(get_tensor(arc, "b", [1]), [7.0])
    dst = tmp_path / "h2.entp"
    store_archive(arc, dst)
    assert dst.read_bytes() == data


def test_independent_writer_values(tmp_path, rng):
    vals = rng.standard_normal((3, 5)).astype("<f4")
    data = handmade({"m": {"dtype": "f32", "shape": [3, 5], "offset": 0, "nbytes": 60}}, vals.tobytes())
    (tmp_path / "x.entp").write_bytes(data)
    got = get_tensor(load_archive(tmp_path / "x.entp"), "m", [3, 5])
    assert got.dtype == np.float64
    np.testing.assert_array_equal(got, vals.astype(np.float64))


def test_f32_widening_of_point_one(tmp_path):
    save_archive(tmp_path / "p.entp", {"x": np.array([0.1], dtype=np.float64)})
    got = get_tensor(load_archive(tmp_path / "p.entp"), "x", [1])[0]
    (expected,) = struct.unpack("<f", struct.pack("<f", 0.1))
    assert got == expected == 0.10000000149011612


def test_offsets_aligned():
    data = encode_archive({"a": np.ones(3, np.float32), "b": np.ones((2, 7), np.float32), "c": np.ones(1, np.float32)})
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen])
    assert all(e["offset"] % 64 == 0 for e in header.values())


def test_missing_name(tmp_path):
    save_archive(tmp_path / "a.entp", {"w": np.zeros(2, np.float32)})
    with pytest.raises(TensorNotFoundError):
        get_tensor(load_archive(tmp_path / "a.entp"), "blocks.0.attn.wq.weight")


def test_shape_mismatch(tmp_path):
    save_archive(tmp_path / "a.entp", {"w": np.zeros((2, 3), np.float32)})
    with pytest.raises(ShapeError):
        get_tensor(load_archive(tmp_path / "a.entp"), "w", [3, 2])


def test_canonical_name(tmp_path):
    save_archive(tmp_path / "a.entp", {"blocks.0.attn.wq.weight": np.eye(4, dtype=np.float32)})
    w = get_tensor(load_archive(tmp_path / "a.entp"), "blocks.0.attn.wq.weight", [4, 4])
    np.testing.assert_array_equal(w, np.eye(4))


@pytest.mark.parametrize(
    "entries,payload,err",
    [
        ({"w": {"dtype": "f32", "shape": [4], "offset": 64, "nbytes": 16}}, b"\0" * 16, ArchiveIntegrityError),
        ({"w": {"dtype": "f32", "shape": [4], "offset": 0, "nbytes": 16}}, b"\0" * 12, ArchiveIntegrityError),
        ({"w": {"dtype": "f32", "shape": [4], "offset": 0, "nbytes": 12}}, b"\0" * 16, ArchiveIntegrityError),
        ({"w": {"dtype": "f32", "shape": [1], "offset": 4, "nbytes": 4}}, b"\0" * 16, ArchiveIntegrityError),
        (
            {"a": {"dtype": "f32", "shape": [32], "offset": 0, "nbytes": 128}, "b": {"dtype": "f32", "shape": [1], "offset": 64, "nbytes": 4}},
            b"\0" * 128,
            ArchiveIntegrityError,
        ),
        ({"w": {"dtype": "f16", "shape": [1], "offset": 0, "nbytes": 2}}, b"\0" * 2, ArchiveParseError),
        ({"w": {"dtype": "f32", "shape": [1]}}, b"\0" * 4, ArchiveParseError),
        ({"w": {"dtype": "f32", "shape": [-1], "offset": 0, "nbytes": 4}}, b"\0" * 4, ArchiveParseError),
    ],
    ids=["offset-past-end", "truncated", "nbytes-mismatch", "unaligned", "overlap", "dtype", "missing-field", "negative-shape"],
)
def test_invalid_archives(tmp_path, entries, payload, err):
    (tmp_path / "bad.entp").write_bytes(handmade(entries, payload))
    with pytest.raises(err):
        load_archive(tmp_path / "bad.entp")


def test_malformed_header(tmp_path):
    header = b"{not json"
    (tmp_path / "bad.entp").write_bytes(b"ENTPRUN1" + struct.pack("<Q", len(header)) + header)
    with pytest.raises(ArchiveParseError):
        load_archive(tmp_path / "bad.entp")


def test_bad_magic_and_header_length(tmp_path):
    (tmp_path / "m.entp").write_bytes(b"NOTMAGIC" + struct.pack("<Q", 2) + b"{}")
    with pytest.raises(ArchiveParseError):
        load_archive(tmp_path / "m.entp")
    (tmp_path / "l.entp").write_bytes(b"ENTPRUN1" + struct.pack("<Q", 99) + b"{}")
    with pytest.raises(ArchiveParseError):
        load_archive(tmp_path / "l.entp")
