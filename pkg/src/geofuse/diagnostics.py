"""Embedding-space probes: pooled cosine similarity per encoder tap.

Given an image pair, we mean-pool the token features of each selected
encoder tap and report the cosine similarity per tap. On matched pairs
(same appearance, different geometry cue) the semantic tap stays maximally
similar while deeper geometry taps diverge -- the contrast that motivates
feeding both branches to the language model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import GeometryEncoder, SemanticEncoder
from .errors import DataError
from .tensor import Tensor

SEMANTIC_TAP = "semantic"


def geometry_tap(block_index: int) -> str:
    return f"geometry-block-{block_index}"


@dataclass(frozen=True)
class SimilarityProbe:
    """Pooling mode plus the encoder taps to compare."""

    taps: tuple[str, ...]
    pooling: str = "mean"

    def __post_init__(self):
        if self.pooling != "mean":
            raise DataError(f"unsupported pooling mode {self.pooling!r}")
        if not self.taps:
            raise DataError("probe needs at least one tap")


def default_probe(n_blocks: int) -> SimilarityProbe:
    return SimilarityProbe(taps=(SEMANTIC_TAP, geometry_tap(n_blocks - 1)))


def cosine_similarity(a, b) -> float:
    """a.b / (|a||b|); rejects zero vectors."""
    av = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    bv = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    av, bv = av.ravel(), bv.ravel()
    if av.shape != bv.shape:
        raise DataError(f"vector shapes differ: {av.shape} vs {bv.shape}")
    na, nb = np.linalg.norm(av), np.linalg.norm(bv)
    if na == 0.0 or nb == 0.0:
        raise DataError("cosine similarity is undefined for zero vectors")
    return float(av @ bv / (na * nb))


def _pooled(tap: str, img: np.ndarray, sem_enc: SemanticEncoder,
            geo_enc: GeometryEncoder) -> np.ndarray:
    if tap == SEMANTIC_TAP:
        return sem_enc.encode(img).data.mean(axis=0)
    if tap.startswith("geometry-block-"):
        idx = int(tap.rsplit("-", 1)[1])
        blocks = geo_enc.encode(img).blocks
        if not (0 <= idx < len(blocks)):
            raise DataError(f"tap {tap} out of range for {len(blocks)} blocks")
        return blocks[idx].data.mean(axis=0)
    raise DataError(f"unknown encoder tap {tap!r}")


def probe_pair(img1: np.ndarray, img2: np.ndarray, probe: SimilarityProbe,
               sem_enc: SemanticEncoder, geo_enc: GeometryEncoder) -> dict[str, float]:
    """Per-tap cosine similarity table for one image pair."""
    if img1.shape != img2.shape:
        raise DataError("probe images must share a shape")
    return {tap: cosine_similarity(_pooled(tap, img1, sem_enc, geo_enc),
                                   _pooled(tap, img2, sem_enc, geo_enc))
            for tap in probe.taps}


def probe_pairs(pairs, probe: SimilarityProbe, sem_enc: SemanticEncoder,
                geo_enc: GeometryEncoder) -> tuple[list[tuple], dict[str, float]]:
    """Run the probe over (pair_id, img1, img2) triples.

    Returns per-pair rows ``(pair_id, tap, similarity)`` and a per-tap mean
    summary -- the contrast table.
    """
    rows: list[tuple] = []
    sums = {tap: 0.0 for tap in probe.taps}
    n = 0
    for pair_id, img1, img2 in pairs:
        sims = probe_pair(img1, img2, probe, sem_enc, geo_enc)
        for tap in probe.taps:
            rows.append((pair_id, tap, sims[tap]))
            sums[tap] += sims[tap]
        n += 1
    if n == 0:
        raise DataError("no pairs supplied to probe")
    summary = {tap: sums[tap] / n for tap in probe.taps}
    return rows, summary
