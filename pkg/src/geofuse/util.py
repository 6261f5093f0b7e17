"""Small shared helpers: seeded RNG derivation, hashing, canonical JSON."""

from __future__ import annotations

import hashlib
import json
import zlib

import numpy as np


def rng_for(seed: int, *labels) -> np.random.Generator:
    """Derive a generator from a base seed plus a label path.

    Labels may be ints or strings; strings are folded in via CRC32 so the
    same (seed, labels) pair always yields the same stream, independent of
    call order elsewhere in the program.
    """
    entropy = [int(seed) & 0xFFFFFFFF]
    for label in labels:
        if isinstance(label, str):
            entropy.append(zlib.crc32(label.encode("utf-8")))
        else:
            entropy.append(int(label) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))


def array_checksum(arr: np.ndarray) -> str:
    """SHA-256 of the exact array bytes (dtype- and layout-normalized)."""
    a = np.ascontiguousarray(arr, dtype=np.float64)
    return hashlib.sha256(a.tobytes()).hexdigest()


def canonical_json(obj) -> str:
    """Deterministic JSON encoding (sorted keys, no stray whitespace)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))
