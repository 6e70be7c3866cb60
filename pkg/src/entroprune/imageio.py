"""Minimal image I/O: binary PGM (P5), binary PPM (P6) and raw float32 tensors.

Raw tensors are ``H, W, C`` as little-endian uint32 followed by ``H*W*C``
little-endian float32 values in [0, 1], row-major with channels last.
8-bit images are mapped to float32 ``v / 255`` so that a P6 file and the raw
tensor written from it load identically.
"""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from .linalg import ShapeError
from .model import ModelConfig

_PNM_HEADER = re.compile(rb"\A(P[56])(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


class ImageFormatError(ValueError):
    pass


def decode_pnm(data: bytes) -> np.ndarray:
    """8-bit P5/P6 to a ``H x W x C`` uint8 array."""
    m = _PNM_HEADER.match(data)
    if not m:
        raise ImageFormatError("not a binary PGM/PPM header")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise ImageFormatError(f"only 8-bit PNM supported, maxval={maxval}")
    c = 1 if magic == b"P5" else 3
    n = w * h * c
    body = data[m.end() : m.end() + n]
    if len(body) != n:
        raise ImageFormatError(f"truncated PNM: {len(body)} of {n} pixel bytes")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c)


def decode_raw_f32(data: bytes) -> np.ndarray:
    if len(data) < 12:
        raise ImageFormatError("raw tensor shorter than its 12-byte header")
    h, w, c = struct.unpack("<3I", data[:12])
    n = h * w * c
    if len(data) != 12 + 4 * n:
        raise ImageFormatError(f"raw tensor {h}x{w}x{c} needs {12 + 4 * n} bytes, file has {len(data)}")
    return np.frombuffer(data, dtype="<f4", count=n, offset=12).reshape(h, w, c)


def read_pixels(path) -> np.ndarray:
    """Pixels as float32 ``H x W x C``; 8-bit formats scaled to [0, 1]."""
    data = Path(path).read_bytes()
    if data[:2] in (b"P5", b"P6"):
        return decode_pnm(data).astype(np.float32) / np.float32(255)
    if data[:1] == b"P" and data[1:2].isdigit():
        raise ImageFormatError(f"unsupported PNM variant {data[:2]!r}")
    return decode_raw_f32(data).astype(np.float32)


def load_image(path, config: ModelConfig) -> np.ndarray:
    """Read an image and normalise it per channel with ``config.mean``/``config.std``."""
    px = read_pixels(path).astype(np.float64)
    expected = (config.image_size, config.image_size, config.in_chans)
    if px.shape != expected:
        raise ShapeError(f"{path}: image is {px.shape}, model expects {expected} (no resizing)")
    return (px - np.asarray(config.mean)) / np.asarray(config.std)


def encode_pnm(pixels) -> bytes:
    px = np.asarray(pixels, dtype=np.uint8)
    if px.ndim == 2:
        px = px[:, :, None]
    h, w, c = px.shape
    if c not in (1, 3):
        raise ShapeError(f"PNM needs 1 or 3 channels, got {c}")
    magic = "P5" if c == 1 else "P6"
    return f"{magic}\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def write_pnm(path, pixels) -> None:
    Path(path).write_bytes(encode_pnm(pixels))


def encode_raw_f32(pixels) -> bytes:
    px = np.asarray(pixels, dtype="<f4")
    if px.ndim == 2:
        px = px[:, :, None]
    return struct.pack("<3I", *px.shape) + px.tobytes()


def write_raw_f32(path, pixels) -> None:
    Path(path).write_bytes(encode_raw_f32(pixels))
