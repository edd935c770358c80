"""Binary clip-tensor files.

Layout: magic ``CLP1``; five little-endian u32 (dtype code, C, T, H, W);
then C*T*H*W little-endian float32 values in C,T,H,W row-major order.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"CLP1"
_HEADER = struct.Struct("<5I")
HEADER_SIZE = len(MAGIC) + _HEADER.size
DTYPE_F32 = 0


def encode_clip(clip: np.ndarray) -> bytes:
    clip = np.asarray(clip)
    if clip.ndim != 4:
        raise FormatError(f"clip must be (C, T, H, W), got shape {clip.shape}")
    header = MAGIC + _HEADER.pack(DTYPE_F32, *clip.shape)
    return header + np.ascontiguousarray(clip, dtype="<f4").tobytes()


def decode_clip(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < len(MAGIC):
        raise FormatError(f"{source}: file shorter than magic", offset=len(buf), path=source)
    magic = bytes(buf[:4])
    if magic != MAGIC:
        raise FormatError(
            f"{source}: bad magic, expected {MAGIC!r} got {magic!r}", offset=0, expected=MAGIC.decode(),
            actual=magic.decode("latin-1"), path=source,
        )
    if len(buf) < HEADER_SIZE:
        raise FormatError(f"{source}: truncated header", offset=len(buf), path=source)
    code, c, t, h, w = _HEADER.unpack_from(buf, 4)
    if code != DTYPE_F32:
        raise FormatError(f"{source}: unsupported dtype code {code}", offset=4, path=source)
    if min(c, t, h, w) == 0:
        raise FormatError(f"{source}: zero extent in header {(c, t, h, w)}", offset=8, path=source)
    expected = c * t * h * w * 4
    payload = len(buf) - HEADER_SIZE
    if payload < expected:
        raise FormatError(
            f"{source}: truncated payload, header declares {c}x{t}x{h}x{w} ({expected} bytes) "
            f"but only {payload} bytes follow",
            offset=len(buf), path=source,
        )
    if payload > expected:
        raise FormatError(
            f"{source}: {payload - expected} trailing bytes after declared payload",
            offset=HEADER_SIZE + expected, path=source,
        )
    data = np.frombuffer(buf, dtype="<f4", count=c * t * h * w, offset=HEADER_SIZE)
    return data.astype(np.float32).reshape(c, t, h, w)


def write_clip(path: "str | os.PathLike", clip: np.ndarray) -> Path:
    path = Path(path)
    path.write_bytes(encode_clip(clip))
    return path


def read_clip(path: "str | os.PathLike") -> np.ndarray:
    return decode_clip(Path(path).read_bytes(), source=str(path))
