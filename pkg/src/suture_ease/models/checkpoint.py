"""Checkpoint files.

Layout: magic ``CKPT``, u32 little-endian header length N, N bytes of UTF-8
JSON (space padded so the blob starts on a 64-byte boundary), then the raw
little-endian tensor blob. The header carries the architecture tag, config,
config hash, tensor table {name, shape, dtype, offset, nbytes} and training
metadata.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from ..autodiff import Tensor
from ..errors import CompatibilityError, FormatError
from .base import FAMILIES, ModelState, config_from_dict, config_hash, param_shapes

MAGIC = b"CKPT"
ALIGN = 64
_DTYPES = {"f32": "<f4", "f64": "<f8"}


def encode_checkpoint(state: ModelState, metadata: "dict | None" = None) -> bytes:
    cfg = state.config.to_dict()
    table, chunks, offset = [], [], 0
    for name, tensor in state.params.items():
        tag = "f64" if tensor.dtype == np.float64 else "f32"
        raw = np.ascontiguousarray(tensor.data, dtype=_DTYPES[tag]).tobytes()
        table.append({"name": name, "shape": list(tensor.shape), "dtype": tag, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format": 1,
        "arch": state.arch,
        "config": cfg,
        "config_hash": config_hash(cfg),
        "tensors": table,
        "metadata": metadata if metadata is not None else state.metadata,
    }
    text = json.dumps(header, sort_keys=True).encode()
    pad = (-(len(MAGIC) + 4 + len(text))) % ALIGN
    text += b" " * pad
    return MAGIC + struct.pack("<I", len(text)) + text + b"".join(chunks)


def save_checkpoint(state: ModelState, path: "str | os.PathLike", metadata: "dict | None" = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_checkpoint(state, metadata))
    os.replace(tmp, path)
    return path


def read_header(buf: bytes, source: str = "<bytes>") -> tuple[dict, int]:
    if len(buf) < 8:
        raise FormatError(f"{source}: file too short for checkpoint header", offset=len(buf), path=source)
    if buf[:4] != MAGIC:
        raise FormatError(
            f"{source}: bad magic, expected {MAGIC!r} got {bytes(buf[:4])!r}", offset=0, path=source,
        )
    (n,) = struct.unpack_from("<I", buf, 4)
    if 8 + n > len(buf):
        raise FormatError(f"{source}: header declares {n} bytes but file ends early", offset=len(buf), path=source)
    try:
        header = json.loads(buf[8 : 8 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt JSON header ({exc})", offset=8, path=source) from exc
    for key in ("arch", "config", "config_hash", "tensors"):
        if key not in header:
            raise FormatError(f"{source}: header missing {key!r}", offset=8, path=source)
    return header, 8 + n


def decode_checkpoint(buf: bytes, source: str = "<bytes>", expected_arch: "str | None" = None,
                      expected_config=None) -> ModelState:
    header, blob_start = read_header(buf, source)
    arch = header["arch"]
    if arch not in FAMILIES:
        raise FormatError(f"{source}: unknown architecture tag {arch!r}", offset=8, path=source)
    if config_hash(header["config"]) != header["config_hash"]:
        raise FormatError(f"{source}: config hash mismatch, header is corrupt", offset=8, path=source)
    if expected_arch is not None and arch != expected_arch:
        raise CompatibilityError(f"{source}: checkpoint holds {arch}, expected {expected_arch}", path=source)
    if expected_config is not None:
        want = config_hash(expected_config.to_dict())
        if want != header["config_hash"]:
            raise CompatibilityError(f"{source}: checkpoint config does not match the requested config", path=source)
    config = config_from_dict(arch, header["config"])
    shapes = param_shapes(arch, config)
    table = header["tensors"]
    if [t["name"] for t in table] != list(shapes) or any(tuple(t["shape"]) != shapes[t["name"]] for t in table):
        raise CompatibilityError(f"{source}: tensor table does not match the {arch} config", path=source)

    blob_len = len(buf) - blob_start
    params = {}
    for entry in table:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise FormatError(f"{source}: unsupported dtype {entry['dtype']!r}", offset=8, path=source)
        count = int(np.prod(entry["shape"]))
        if entry["nbytes"] != count * np.dtype(dtype).itemsize:
            raise FormatError(f"{source}: size mismatch for {entry['name']}", offset=8, path=source)
        end = entry["offset"] + entry["nbytes"]
        if end > blob_len:
            raise FormatError(
                f"{source}: blob truncated while reading {entry['name']}",
                offset=blob_start + min(blob_len, end), path=source,
            )
        arr = np.frombuffer(buf, dtype=dtype, count=count, offset=blob_start + entry["offset"])
        params[entry["name"]] = Tensor(arr.reshape(entry["shape"]).astype(np.dtype(dtype).newbyteorder("=")),
                                       requires_grad=True, name=entry["name"])
    return ModelState(arch, config, params, header.get("metadata") or {})


def load_checkpoint(path: "str | os.PathLike", expected_arch: "str | None" = None, expected_config=None) -> ModelState:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"checkpoint not found: {path}", path=str(path)) from exc
    return decode_checkpoint(buf, str(path), expected_arch, expected_config)
