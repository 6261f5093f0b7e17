"""Two-branch visual embedding: per-branch adapters, the multi-tap
hierarchical adapter, interleaved token fusion, and random semantic-branch
dropping.

The hierarchical adapter pairs one two-layer MLP adapter with each tapped
geometry-encoder block and sums the projected outputs:

    E_geo = sum_k adapter_k(blocks[tap_k])

By default the last four blocks are tapped; one/three/five-tap variants are
the ablation surface. The fused sequence alternates semantic and geometry
tokens in their original spatial order. During training, the whole semantic
branch of a sample may be zero-masked with a configured probability (one
Bernoulli draw per sample), which pushes the model to actually use the
geometry branch instead of shortcutting through appearance features.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .encoders import BlockFeatures, GeometryEncoder, SemanticEncoder
from .errors import ContractError
from .tensor import Tensor, gelu, interleave_rows, matmul, mul, take_rows

SEMANTIC = "semantic"
GEOMETRY = "geometry"
TEXT = "text"

_ORDERS = ("semantic-first", "geometry-first")


@dataclass
class Adapter:
    """Two-layer MLP with GELU between, projecting encoder tokens into the
    language-model embedding space."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int) -> "Adapter":
        w1 = Tensor(rng.normal(0.0, np.sqrt(2.0 / d_in), (d_in, d_hidden)), requires_grad=True)
        b1 = Tensor(np.zeros(d_hidden), requires_grad=True)
        w2 = Tensor(rng.normal(0.0, np.sqrt(2.0 / d_hidden), (d_hidden, d_out)), requires_grad=True)
        b2 = Tensor(np.zeros(d_out), requires_grad=True)
        return cls(w1, b1, w2, b2)

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_out(self) -> int:
        return self.w2.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def adapter_forward(adapter: Adapter, x: Tensor) -> Tensor:
    """MLP(GELU(MLP(x))) applied row-wise to a token matrix."""
    if x.ndim != 2 or x.shape[1] != adapter.d_in:
        raise ContractError(f"adapter expects (*, {adapter.d_in}) input, got {x.shape}")
    hidden = gelu(matmul(x, adapter.w1) + adapter.b1)
    return matmul(hidden, adapter.w2) + adapter.b2


@dataclass
class HierarchicalAdapter:
    """Ordered sub-adapters bound one-to-one to tapped encoder blocks."""

    sub_adapters: list[Adapter]
    tapped_block_indices: list[int]

    def __post_init__(self):
        if len(self.sub_adapters) != len(self.tapped_block_indices):
            raise ContractError("one tapped block index is required per sub-adapter")
        if not self.sub_adapters:
            raise ContractError("at least one sub-adapter is required")
        d_out = self.sub_adapters[0].d_out
        if any(a.d_out != d_out for a in self.sub_adapters):
            raise ContractError("all sub-adapters must share the output dimension")

    @classmethod
    def init(cls, rng: np.random.Generator, n_sub: int, n_blocks: int,
             d_in: int, d_hidden: int, d_out: int) -> "HierarchicalAdapter":
        """Build ``n_sub`` adapters tapping the last ``n_sub`` blocks."""
        if n_sub > n_blocks:
            raise ContractError("cannot tap more blocks than the encoder provides")
        taps = list(range(n_blocks - n_sub, n_blocks))
        subs = [Adapter.init(rng, d_in, d_hidden, d_out) for _ in range(n_sub)]
        return cls(subs, taps)


def hierarchical_forward(hier: HierarchicalAdapter, blocks: BlockFeatures) -> Tensor:
    """Sum of each sub-adapter applied to its tapped block."""
    for idx in hier.tapped_block_indices:
        if not (0 <= idx < blocks.n_blocks):
            raise ContractError(f"tapped block index {idx} out of range for {blocks.n_blocks} blocks")
    total: Tensor | None = None
    for adapter, idx in zip(hier.sub_adapters, hier.tapped_block_indices):
        part = adapter_forward(adapter, blocks.blocks[idx])
        total = part if total is None else total + part
    return total


@dataclass(frozen=True)
class FusionConfig:
    """Knobs for the fused visual sequence.

    ``clip_branch_enabled=False`` removes the semantic branch entirely
    (geometry-only sequence); ``geometry_branch_enabled=False`` keeps the
    interleaved layout but zeroes every geometry token (semantic-only
    ablation).
    """

    drop_probability: float = 0.3
    interleave_order: str = "semantic-first"
    clip_branch_enabled: bool = True
    geometry_branch_enabled: bool = True

    def __post_init__(self):
        if not (0.0 <= self.drop_probability <= 1.0):
            raise ContractError("drop_probability must lie in [0, 1]")
        if self.interleave_order not in _ORDERS:
            raise ContractError(f"interleave_order must be one of {_ORDERS}")


@dataclass
class EmbeddingSequence:
    """Ordered token rows with a branch tag and a drop flag per token."""

    tokens: Tensor
    tags: tuple[str, ...]
    dropped: tuple[bool, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.tokens.ndim != 2:
            raise ContractError("EmbeddingSequence tokens must be a rank-2 tensor")
        if self.dropped is None:
            self.dropped = tuple(False for _ in self.tags)
        if len(self.tags) != self.tokens.shape[0] or len(self.dropped) != self.tokens.shape[0]:
            raise ContractError("tags/drop flags must match the token count")
        bad = set(self.tags) - {SEMANTIC, GEOMETRY, TEXT}
        if bad:
            raise ContractError(f"unknown branch tags: {sorted(bad)}")

    @property
    def length(self) -> int:
        return self.tokens.shape[0]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]

    def indices_of(self, tag: str) -> list[int]:
        return [i for i, t in enumerate(self.tags) if t == tag]


def interleave(sem: Tensor, geo: Tensor, order: str = "semantic-first") -> EmbeddingSequence:
    """Alternate the two branches token-by-token, preserving spatial order."""
    if order not in _ORDERS:
        raise ContractError(f"interleave order must be one of {_ORDERS}")
    if sem.shape != geo.shape:
        raise ContractError(f"branch shapes differ: {sem.shape} vs {geo.shape}")
    if order == "semantic-first":
        tokens = interleave_rows(sem, geo)
        tags = (SEMANTIC, GEOMETRY) * sem.shape[0]
    else:
        tokens = interleave_rows(geo, sem)
        tags = (GEOMETRY, SEMANTIC) * sem.shape[0]
    return EmbeddingSequence(tokens, tags)


def de_interleave(seq: EmbeddingSequence) -> tuple[Tensor, Tensor]:
    """Recover the (semantic, geometry) branches from an interleaved sequence."""
    sem_idx = seq.indices_of(SEMANTIC)
    geo_idx = seq.indices_of(GEOMETRY)
    if len(sem_idx) != len(geo_idx) or len(sem_idx) + len(geo_idx) != seq.length:
        raise ContractError("sequence is not a pure two-branch interleaving")
    return take_rows(seq.tokens, sem_idx), take_rows(seq.tokens, geo_idx)


def _mask_tag(seq: EmbeddingSequence, tag: str, mark_dropped: bool) -> EmbeddingSequence:
    """Zero every token of one branch, leaving the rest bit-identical."""
    col = np.array([[0.0] if t == tag else [1.0] for t in seq.tags])
    tokens = mul(seq.tokens, col)
    dropped = tuple(d or (mark_dropped and t == tag) for d, t in zip(seq.dropped, seq.tags))
    return EmbeddingSequence(tokens, seq.tags, dropped)


def drop_clip_mask(seq: EmbeddingSequence, p: float, rng: np.random.Generator,
                   training: bool) -> EmbeddingSequence:
    """Per-sample semantic-branch dropout.

    With one Bernoulli draw per call, either every semantic token is replaced
    by an exact zero vector (and flagged), or the sequence passes through
    untouched. Never fires outside training.
    """
    if not (0.0 <= p <= 1.0):
        raise ContractError("drop probability must lie in [0, 1]")
    if not training or p == 0.0:
        return seq
    if rng.random() < p:
        return _mask_tag(seq, SEMANTIC, mark_dropped=True)
    return seq


def zero_geometry_branch(seq: EmbeddingSequence) -> EmbeddingSequence:
    """Replace every geometry token with zeros (semantic-only ablation)."""
    return _mask_tag(seq, GEOMETRY, mark_dropped=False)


def build_visual_embedding(img: np.ndarray,
                           sem_enc: SemanticEncoder,
                           geo_enc: GeometryEncoder,
                           clip_adapter: Adapter,
                           hier: HierarchicalAdapter,
                           cfg: FusionConfig,
                           rng: np.random.Generator | None = None,
                           training: bool = False) -> EmbeddingSequence:
    """End-to-end visual branch: encode, adapt, interleave, maybe drop."""
    blocks = geo_enc.encode(img)
    sem_tokens = sem_enc.encode(img) if cfg.clip_branch_enabled else None
    return fuse_visual_features(sem_tokens, blocks, clip_adapter, hier, cfg,
                                rng=rng, training=training)


def fuse_visual_features(sem_tokens: Tensor | None,
                         blocks: BlockFeatures,
                         clip_adapter: Adapter,
                         hier: HierarchicalAdapter,
                         cfg: FusionConfig,
                         rng: np.random.Generator | None = None,
                         training: bool = False) -> EmbeddingSequence:
    """Same as :func:`build_visual_embedding` but starting from encoder
    outputs, so callers may cache the frozen-encoder work."""
    geo = hierarchical_forward(hier, blocks)
    if not cfg.clip_branch_enabled:
        return EmbeddingSequence(geo, (GEOMETRY,) * geo.shape[0])
    sem = adapter_forward(clip_adapter, sem_tokens)
    seq = interleave(sem, geo, cfg.interleave_order)
    if not cfg.geometry_branch_enabled:
        seq = zero_geometry_branch(seq)
    if training:
        if rng is None:
            raise ContractError("training-mode fusion requires an explicit rng")
        seq = drop_clip_mask(seq, cfg.drop_probability, rng, training=True)
    return seq


def with_variant(cfg: FusionConfig, **changes) -> FusionConfig:
    """Convenience for deriving ablation configs."""
    return replace(cfg, **changes)
