"""Versioned binary checkpoint container.

Layout (all integers little-endian, unsigned):

    magic   4 bytes  b"GFCP"
    version u32      currently 1
    mlen    u32      length of the UTF-8 canonical-JSON metadata blob
    meta    mlen bytes
    count   u32      number of tensors
    then, for each tensor in ascending name order:
        nlen  u16, name (UTF-8)
        ndim  u8, dims (u32 each)
        data  float64 little-endian, row-major

The metadata blob is canonical JSON (sorted keys, no whitespace), so saving
identical content always produces identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import LoadError
from .util import canonical_json

MAGIC = b"GFCP"
VERSION = 1


def write_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    meta_bytes = canonical_json(meta).encode("utf-8")
    blob += struct.pack("<I", len(meta_bytes))
    blob += meta_bytes
    names = sorted(arrays)
    blob += struct.pack("<I", len(names))
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        nb = name.encode("utf-8")
        blob += struct.pack("<H", len(nb))
        blob += nb
        blob += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<I", dim)
        blob += arr.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read checkpoint: {exc}") from exc
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(raw):
            raise LoadError("checkpoint truncated")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise LoadError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise LoadError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (mlen,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(bytes(take(mlen)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LoadError(f"corrupt checkpoint metadata: {exc}") from exc
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(ndim))
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        arrays[name] = data
    if pos != len(raw):
        raise LoadError("trailing bytes after checkpoint payload")
    return arrays, meta
