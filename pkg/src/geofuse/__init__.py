"""geofuse: geometry-semantics fusion for a toy multimodal language model.

The package bundles a small float64 autodiff tensor library, frozen stub
vision encoders with per-block taps, a hierarchical adapter with interleaved
token fusion and random semantic-branch dropping, a causal toy decoder with
low-rank fine-tuning, a two-stage training schedule, a metric-answer scoring
harness, synthetic dataset tooling, and embedding-similarity diagnostics.
"""

from .encoders import EncoderConfig, GeometryEncoder, SemanticEncoder
from .errors import (ConfigError, ContractError, DataError, GeofuseError,
                     LoadError, StateError)
from .fusion import (Adapter, EmbeddingSequence, FusionConfig,
                     HierarchicalAdapter, adapter_forward, build_visual_embedding,
                     drop_clip_mask, hierarchical_forward, interleave)
from .lm import DecoderConfig, LoRAConfig, Vocab
from .model import FusedModel
from .optim import AdamW, ParamSet
from .scoring import Quantity, Report, aggregate, parse_quantity, score, to_meters
from .tensor import Tensor, finite_difference_check, no_grad

__version__ = "0.1.0"

__all__ = [
    "Adapter", "AdamW", "ConfigError", "ContractError", "DataError",
    "DecoderConfig", "EmbeddingSequence", "EncoderConfig", "FusedModel",
    "FusionConfig", "GeofuseError", "GeometryEncoder", "HierarchicalAdapter",
    "LoRAConfig", "LoadError", "ParamSet", "Quantity", "Report",
    "SemanticEncoder", "StateError", "Tensor", "Vocab", "adapter_forward",
    "aggregate", "build_visual_embedding", "drop_clip_mask",
    "finite_difference_check", "hierarchical_forward", "interleave",
    "no_grad", "parse_quantity", "score", "to_meters",
]
