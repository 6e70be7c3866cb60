"""Named tensor archives.

File layout::

    b"ENTPRUN1"                      8-byte magic
    u64 little-endian                header length in bytes
    UTF-8 JSON header                {name: {"dtype": "f32", "shape": [...],
                                             "offset": int, "nbytes": int}}
    payload                          raw little-endian float32 data

Offsets are relative to the start of the payload and 64-byte aligned.

Canonical tensor names (weights are stored ``(out_features, in_features)``,
i.e. ``y = x @ W.T + b``)::

    patch_embed.weight   (d, p*p*C)   patch vectors flattened as (row, col, channel)
    patch_embed.bias     (d,)
    cls_token            (1, d)
    pos_embed            (1 + num_patches, d)   row 0 belongs to the class token
    blocks.{i}.ln1.gamma / .beta         (d,)
    blocks.{i}.attn.wq.weight            (d, d)   head k owns rows k*d'..(k+1)*d'
    blocks.{i}.attn.{wq,wk,wv}.bias      (d,)
    blocks.{i}.attn.wo.weight / .bias    (d, d) / (d,)
    blocks.{i}.ln2.gamma / .beta         (d,)
    blocks.{i}.ffn.fc1.weight / .bias    (hidden, d) / (hidden,)
    blocks.{i}.ffn.fc2.weight / .bias    (d, hidden) / (d,)
    norm.gamma / norm.beta               (d,)
    head.weight / head.bias              (num_classes, d) / (num_classes,)

Block indices ``i`` are 0-based in tensor names.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .linalg import ShapeError

MAGIC = b"ENTPRUN1"
ALIGN = 64

__all__ = [
    "ArchiveError",
    "ArchiveParseError",
    "ArchiveIntegrityError",
    "TensorNotFoundError",
    "TensorEntry",
    "WeightArchive",
    "load_archive",
    "get_tensor",
    "save_archive",
    "store_archive",
    "encode_archive",
    "decode_archive",
]


class ArchiveError(Exception):
    pass


class ArchiveParseError(ArchiveError):
    """Header is malformed or uses an unsupported feature."""


class ArchiveIntegrityError(ArchiveError):
    """Header is well-formed but inconsistent with the payload."""


class TensorNotFoundError(ArchiveError, KeyError):
    pass


@dataclass(frozen=True)
class TensorEntry:
    shape: tuple[int, ...]
    offset: int
    nbytes: int


@dataclass(frozen=True)
class WeightArchive:
    entries: dict[str, TensorEntry]
    header: bytes
    payload: bytes

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def names(self) -> list[str]:
        return list(self.entries)

    def tensor(self, name: str, expected_shape=None) -> np.ndarray:
        return get_tensor(self, name, expected_shape)

    def to_bytes(self) -> bytes:
        return MAGIC + struct.pack("<Q", len(self.header)) + self.header + self.payload


def _parse_entries(header: bytes) -> dict[str, TensorEntry]:
    try:
        doc = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveParseError(f"header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ArchiveParseError("header must be a JSON object")

    entries = {}
    for name, meta in doc.items():
        if not isinstance(meta, dict):
            raise ArchiveParseError(f"{name!r}: entry must be an object")
        missing = {"dtype", "shape", "offset", "nbytes"} - meta.keys()
        if missing:
            raise ArchiveParseError(f"{name!r}: missing fields {sorted(missing)}")
        if meta["dtype"] != "f32":
            raise ArchiveParseError(f"{name!r}: unsupported dtype {meta['dtype']!r}")
        shape, offset, nbytes = meta["shape"], meta["offset"], meta["nbytes"]
        if not isinstance(shape, list) or not all(_is_count(s) for s in shape):
            raise ArchiveParseError(f"{name!r}: shape must be a list of non-negative ints")
        if not _is_count(offset) or not _is_count(nbytes):
            raise ArchiveParseError(f"{name!r}: offset/nbytes must be non-negative ints")
        entries[name] = TensorEntry(tuple(shape), offset, nbytes)
    return entries


def _is_count(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool) and v >= 0


def _check_integrity(entries: Mapping[str, TensorEntry], payload_len: int) -> None:
    spans = []
    for name, e in entries.items():
        if e.offset % ALIGN:
            raise ArchiveIntegrityError(f"{name!r}: offset {e.offset} not {ALIGN}-byte aligned")
        if e.nbytes != math.prod(e.shape) * 4:
            raise ArchiveIntegrityError(
                f"{name!r}: nbytes {e.nbytes} != 4 * prod{list(e.shape)}"
            )
        if e.offset + e.nbytes > payload_len:
            raise ArchiveIntegrityError(
                f"{name!r}: bytes [{e.offset}, {e.offset + e.nbytes}) exceed payload of {payload_len}"
            )
        if e.nbytes:
            spans.append((e.offset, e.offset + e.nbytes, name))
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise ArchiveIntegrityError(f"entries {a!r} and {b!r} overlap")


def decode_archive(data: bytes) -> WeightArchive:
    if len(data) < 16 or data[:8] != MAGIC:
        raise ArchiveParseError("missing ENTPRUN1 magic")
    (hlen,) = struct.unpack("<Q", data[8:16])
    if 16 + hlen > len(data):
        raise ArchiveParseError(f"header length {hlen} exceeds file size")
    header = bytes(data[16 : 16 + hlen])
    payload = bytes(data[16 + hlen :])
    entries = _parse_entries(header)
    _check_integrity(entries, len(payload))
    return WeightArchive(entries, header, payload)


def load_archive(path) -> WeightArchive:
    """Read and validate an archive. Tensor data stays packed until requested."""
    return decode_archive(Path(path).read_bytes())


def get_tensor(archive: WeightArchive, name: str, expected_shape=None) -> np.ndarray:
    """Return tensor ``name`` widened to float64.

    ``expected_shape`` is checked exactly; pass it whenever the caller knows
    what it needs so that layout mistakes fail loudly.
    """
    try:
        e = archive.entries[name]
    except KeyError:
        raise TensorNotFoundError(name) from None
    if expected_shape is not None and tuple(expected_shape) != e.shape:
        raise ShapeError(f"{name!r}: stored shape {list(e.shape)}, expected {list(expected_shape)}")
    raw = np.frombuffer(archive.payload, dtype="<f4", count=e.nbytes // 4, offset=e.offset)
    return raw.astype(np.float64).reshape(e.shape)


def encode_archive(tensors: Mapping[str, np.ndarray]) -> bytes:
    """Serialise ``tensors`` (name order preserved) into the canonical byte layout."""
    meta = {}
    chunks = []
    offset = 0
    for name, value in tensors.items():
        arr = np.asarray(value)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name!r}: non-finite values")
        raw = arr.astype("<f4").tobytes()
        pad = -offset % ALIGN
        if pad:
            chunks.append(b"\0" * pad)
            offset += pad
        meta[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps(meta, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def save_archive(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_archive(tensors))


def store_archive(archive: WeightArchive, path) -> None:
    """Write a loaded archive back out unchanged."""
    Path(path).write_bytes(archive.to_bytes())
