"""Toy decoder-only language model and low-rank adaptation.

The decoder is a plain pre-norm causal transformer operating on a single
spliced token sequence (visual tokens first, then text). Positions are
sinusoidal, so the only language-model parameters are the embedding table,
the per-layer matrices/biases/norms, and the output head. All weight
matrices can be wrapped with low-rank adapters: the base matrix W is frozen
and the effective weight becomes W + (alpha/rank) * B @ A, with B zero at
initialization so wrapping is an exact no-op until training moves A/B.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fnmatch import fnmatchcase
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, ContractError
from .fusion import TEXT, EmbeddingSequence
from .optim import ParamSet
from .tensor import (Tensor, concat_cols, concat_rows, cross_entropy, gelu,
                     layernorm, matmul, no_grad, slice_cols, softmax,
                     take_rows)

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)


class Vocab:
    """Bijective token <-> id mapping with required special tokens."""

    def __init__(self, tokens: list[str]):
        if len(set(tokens)) != len(tokens):
            raise ConfigError("vocabulary tokens must be unique")
        for sp in SPECIALS:
            if sp not in tokens:
                raise ConfigError(f"vocabulary is missing special token {sp}")
        self.tokens = list(tokens)
        self._ids = {tok: i for i, tok in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def bos_id(self) -> int:
        return self._ids[BOS]

    @property
    def eos_id(self) -> int:
        return self._ids[EOS]

    @property
    def unk_id(self) -> int:
        return self._ids[UNK]

    def encode(self, text: str | list[str]) -> list[int]:
        words = text.split() if isinstance(text, str) else list(text)
        return [self._ids.get(w, self._ids[UNK]) for w in words]

    def decode(self, ids: list[int]) -> str:
        words = []
        for i in ids:
            if not (0 <= i < len(self.tokens)):
                raise IndexError(f"token id {i} out of range")
            tok = self.tokens[i]
            if tok in (PAD, BOS, EOS):
                continue
            words.append(tok)
        return " ".join(words)

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


@dataclass(frozen=True)
class DecoderConfig:
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 2
    max_len: int = 64
    vocab_size: int = 0
    mlp_hidden: int = 0  # defaults to 4 * d_model

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractError("d_model must be divisible by n_heads")
        if self.vocab_size <= 0:
            raise ContractError("vocab_size must be set")
        if self.mlp_hidden == 0:
            object.__setattr__(self, "mlp_hidden", 4 * self.d_model)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    """Classic fixed sin/cos positional table, (max_len, d_model)."""
    pos = np.arange(max_len)[:, None].astype(np.float64)
    dim = np.arange(d_model // 2)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2.0 * dim / d_model)
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    return table


def init_decoder_params(cfg: DecoderConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Fresh trainable decoder parameters, named under the ``lm.`` prefix."""
    d = cfg.d_model
    params: dict[str, Tensor] = {}

    def p(name, arr):
        params[name] = Tensor(arr, requires_grad=True)

    p("lm.embed", rng.normal(0.0, 0.5, (cfg.vocab_size, d)))
    for i in range(cfg.n_layers):
        pre = f"lm.blk{i}"
        p(f"{pre}.ln1.g", np.ones(d))
        p(f"{pre}.ln1.b", np.zeros(d))
        p(f"{pre}.attn.wqkv", rng.normal(0.0, 1.0 / np.sqrt(d), (d, 3 * d)))
        p(f"{pre}.attn.bqkv", np.zeros(3 * d))
        p(f"{pre}.attn.wo", rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)))
        p(f"{pre}.attn.bo", np.zeros(d))
        p(f"{pre}.ln2.g", np.ones(d))
        p(f"{pre}.ln2.b", np.zeros(d))
        p(f"{pre}.mlp.w1", rng.normal(0.0, np.sqrt(2.0 / d), (d, cfg.mlp_hidden)))
        p(f"{pre}.mlp.b1", np.zeros(cfg.mlp_hidden))
        p(f"{pre}.mlp.w2", rng.normal(0.0, np.sqrt(2.0 / cfg.mlp_hidden), (cfg.mlp_hidden, d)))
        p(f"{pre}.mlp.b2", np.zeros(d))
    p("lm.lnf.g", np.ones(d))
    p("lm.lnf.b", np.zeros(d))
    p("lm.head", rng.normal(0.0, 1.0 / np.sqrt(d), (d, cfg.vocab_size)))
    return params


#: Matrix parameters eligible for low-rank wrapping.
LM_MATRIX_PATTERNS = ("lm.embed", "lm.blk*.attn.wqkv", "lm.blk*.attn.wo",
                      "lm.blk*.mlp.w1", "lm.blk*.mlp.w2", "lm.head")


def embed_text(embed_matrix: Tensor, ids: list[int]) -> Tensor:
    """Trainable table lookup; an empty id list gives a (0, D) tensor."""
    return take_rows(embed_matrix, np.asarray(ids, dtype=np.int64))


def splice_input(vis: EmbeddingSequence | None, txt: Tensor) -> EmbeddingSequence:
    """Concatenate the visual sequence (first) with text token embeddings."""
    if vis is None or vis.length == 0:
        base = txt if vis is None else concat_rows([vis.tokens, txt])
        return EmbeddingSequence(base, (TEXT,) * txt.shape[0])
    if txt.ndim != 2 or txt.shape[1] != vis.dim:
        raise ContractError(f"text dim {txt.shape} does not match visual dim {vis.dim}")
    tokens = concat_rows([vis.tokens, txt])
    tags = vis.tags + (TEXT,) * txt.shape[0]
    dropped = vis.dropped + (False,) * txt.shape[0]
    return EmbeddingSequence(tokens, tags, dropped)


_NEG_MASK = -1e9  # underflows to exactly zero attention after softmax


def decoder_forward(params: Mapping[str, Tensor], seq: EmbeddingSequence | Tensor,
                    cfg: DecoderConfig) -> Tensor:
    """Causal decoder logits, one row per input position."""
    x = seq.tokens if isinstance(seq, EmbeddingSequence) else seq
    if x.ndim != 2 or x.shape[1] != cfg.d_model:
        raise ContractError(f"decoder expects (*, {cfg.d_model}) input, got {x.shape}")
    n = x.shape[0]
    if n > cfg.max_len:
        raise ContractError(f"sequence length {n} exceeds max_len {cfg.max_len}")

    x = x + sinusoidal_positions(cfg.max_len, cfg.d_model)[:n]
    causal = np.triu(np.full((n, n), _NEG_MASK), k=1)
    scale = 1.0 / np.sqrt(cfg.head_dim)

    for i in range(cfg.n_layers):
        pre = f"lm.blk{i}"
        h = layernorm(x, params[f"{pre}.ln1.g"], params[f"{pre}.ln1.b"])
        qkv = matmul(h, params[f"{pre}.attn.wqkv"]) + params[f"{pre}.attn.bqkv"]
        d = cfg.d_model
        heads = []
        for hd in range(cfg.n_heads):
            lo, hi = hd * cfg.head_dim, (hd + 1) * cfg.head_dim
            q = slice_cols(qkv, lo, hi)
            k = slice_cols(qkv, d + lo, d + hi)
            v = slice_cols(qkv, 2 * d + lo, 2 * d + hi)
            scores = matmul(q, k.T) * scale + causal
            heads.append(matmul(softmax(scores), v))
        attn = concat_cols(heads)
        x = x + (matmul(attn, params[f"{pre}.attn.wo"]) + params[f"{pre}.attn.bo"])
        h = layernorm(x, params[f"{pre}.ln2.g"], params[f"{pre}.ln2.b"])
        h = gelu(matmul(h, params[f"{pre}.mlp.w1"]) + params[f"{pre}.mlp.b1"])
        x = x + (matmul(h, params[f"{pre}.mlp.w2"]) + params[f"{pre}.mlp.b2"])

    x = layernorm(x, params["lm.lnf.g"], params["lm.lnf.b"])
    return matmul(x, params["lm.head"])


def autoregressive_loss(params: Mapping[str, Tensor], cfg: DecoderConfig,
                        prompt: EmbeddingSequence, answer_ids: list[int]) -> Tensor:
    """Teacher-forced mean cross-entropy over the answer positions only.

    The prompt (visual tokens plus question text) carries no loss; position
    ``len(prompt) - 1 + m`` predicts answer token ``m``.
    """
    if not answer_ids:
        raise ContractError("answer must be non-empty")
    ans = list(answer_ids)
    if len(ans) > 1:
        ans_emb = embed_text(params["lm.embed"], ans[:-1])
        full = EmbeddingSequence(concat_rows([prompt.tokens, ans_emb]),
                                 prompt.tags + (TEXT,) * (len(ans) - 1),
                                 prompt.dropped + (False,) * (len(ans) - 1))
    else:
        full = prompt
    logits = decoder_forward(params, full, cfg)
    first = prompt.length - 1
    rows = take_rows(logits, np.arange(first, first + len(ans)))
    return cross_entropy(rows, ans)


def generate_greedy(params: Mapping[str, Tensor], cfg: DecoderConfig,
                    prompt: EmbeddingSequence, max_new: int, eos_id: int) -> list[int]:
    """Deterministic argmax decoding until EOS, ``max_new`` tokens, or the
    model's length limit."""
    if prompt.length >= cfg.max_len and max_new > 0:
        raise ContractError("no room left to generate within max_len")
    out: list[int] = []
    with no_grad():
        tokens = prompt.tokens
        tags = prompt.tags
        for _ in range(max_new):
            if tokens.shape[0] >= cfg.max_len:
                break
            logits = decoder_forward(params, EmbeddingSequence(tokens, tags), cfg)
            next_id = int(np.argmax(logits.data[-1]))
            if next_id == eos_id:
                break
            out.append(next_id)
            nxt = embed_text(params["lm.embed"], [next_id])
            tokens = concat_rows([tokens, nxt])
            tags = tags + (TEXT,)
    return out


# -- low-rank adaptation ---------------------------------------------------


@dataclass(frozen=True)
class LoRAConfig:
    """Rank, scaling, and target-matrix selectors for low-rank wrapping."""

    rank: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = LM_MATRIX_PATTERNS

    def __post_init__(self):
        if self.rank < 1:
            raise ContractError("rank must be >= 1")

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def lora_wrap(params: ParamSet, cfg: LoRAConfig, rng: np.random.Generator) -> list[str]:
    """Attach zero-initialized low-rank factors to every target matrix.

    The base matrix is frozen; ``<name>.lora_a`` (rank x cols, small random)
    and ``<name>.lora_b`` (rows x rank, zeros) become the trainable pair.
    Returns the wrapped base names.
    """
    targets = params.select(cfg.targets)
    targets = [t for t in targets if not t.endswith((".lora_a", ".lora_b"))]
    if not targets:
        raise ConfigError(f"no parameters match LoRA targets {cfg.targets}")
    for name in targets:
        base = params[name]
        if base.ndim != 2:
            raise ConfigError(f"LoRA target '{name}' is not a matrix")
        rows, cols = base.shape
        if cfg.rank >= min(rows, cols):
            raise ContractError(f"rank {cfg.rank} too large for {name} with shape {base.shape}")
        params.add(f"{name}.lora_a", Tensor(rng.normal(0.0, 0.02, (cfg.rank, cols)),
                                            requires_grad=True))
        params.add(f"{name}.lora_b", Tensor(np.zeros((rows, cfg.rank)), requires_grad=True))
        params.freeze(name)
    return targets


def is_wrapped(params: ParamSet, name: str) -> bool:
    return f"{name}.lora_a" in params and f"{name}.lora_b" in params


def lora_effective(params: ParamSet, name: str, cfg: LoRAConfig) -> Tensor:
    """W + (alpha/rank) * B @ A as a graph expression."""
    base = params[name]
    if not is_wrapped(params, name):
        return base
    delta = matmul(params[f"{name}.lora_b"], params[f"{name}.lora_a"])
    return base + delta * cfg.scale


def lora_merge(params: ParamSet, cfg: LoRAConfig) -> dict[str, np.ndarray]:
    """Materialized effective weights for every wrapped matrix."""
    merged: dict[str, np.ndarray] = {}
    for name in params.names():
        if name.endswith((".lora_a", ".lora_b")):
            continue
        if is_wrapped(params, name):
            a = params[f"{name}.lora_a"].data
            b = params[f"{name}.lora_b"].data
            merged[name] = params[name].data + cfg.scale * (b @ a)
    return merged


def lm_view(params: ParamSet, lora: LoRAConfig | None,
            matrix_names: list[str] | None = None) -> dict[str, Tensor]:
    """The decoder's view of its parameters, with low-rank composition applied.

    Built once per batch so the composed weight tensors (and their gradients)
    are shared across every sample in the batch.
    """
    view: dict[str, Tensor] = {}
    for name, tensor in params.items():
        if not name.startswith("lm.") or name.endswith((".lora_a", ".lora_b")):
            continue
        if lora is not None and is_wrapped(params, name):
            view[name] = lora_effective(params, name, lora)
        else:
            view[name] = tensor
    return view


def match_any(name: str, patterns: tuple[str, ...]) -> bool:
    return any(fnmatchcase(name, p) for p in patterns)
