"""Full-model assembly: encoders + adapters + decoder under one ParamSet.

Parameter naming scheme (used by freeze selectors, checkpoints, and LoRA):

    encoder.sem.* / encoder.geo.*   frozen encoder constants
    clip_adapter.{w1,b1,w2,b2}      semantic-branch adapter
    hier_adapter.<k>.{w1,b1,w2,b2}  k-th sub-adapter of the hierarchical stack
    lm.*                            decoder, embedding table, output head
    lm.<matrix>.lora_{a,b}          low-rank factors once wrapped
"""

from __future__ import annotations

import numpy as np

from . import data as datamod
from .encoders import EncoderConfig, GeometryEncoder, SemanticEncoder
from .errors import ConfigError
from .fusion import (Adapter, FusionConfig, HierarchicalAdapter,
                     fuse_visual_features)
from .lm import (DecoderConfig, LoRAConfig, Vocab, autoregressive_loss,
                 embed_text, generate_greedy, lm_view, lora_wrap,
                 init_decoder_params, splice_input)
from .optim import ParamSet
from .tensor import Tensor
from .util import rng_for

VARIANT_SUB_ADAPTERS = {"sa": 1, "ha3": 3, "ha4": 4, "ha5": 5}


class FusedModel:
    """Bundles the frozen encoders, both adapter branches, and the decoder."""

    def __init__(self, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig,
                 fusion_cfg: FusionConfig, vocab: Vocab, variant: str, seed: int):
        if variant not in VARIANT_SUB_ADAPTERS:
            raise ConfigError(f"unknown variant {variant!r}; expected one of "
                              f"{sorted(VARIANT_SUB_ADAPTERS)}")
        self.enc_cfg = enc_cfg
        self.dec_cfg = dec_cfg
        self.fusion_cfg = fusion_cfg
        self.vocab = vocab
        self.variant = variant
        self.seed = seed
        self.lora: LoRAConfig | None = None
        self.completed_stages: set[int] = set()

        self.semantic_enc = SemanticEncoder(enc_cfg)
        self.geometry_enc = GeometryEncoder(enc_cfg)

        rng = rng_for(seed, "model-init")
        d = dec_cfg.d_model
        self.clip_adapter = Adapter.init(rng, enc_cfg.d_sem, d, d)
        n_sub = VARIANT_SUB_ADAPTERS[variant]
        self.hier_adapter = HierarchicalAdapter.init(
            rng, n_sub, enc_cfg.n_blocks, enc_cfg.d_geo, d, d)

        self.params = ParamSet()
        for name, arr in self.semantic_enc.param_arrays().items():
            self.params.add(name, Tensor(arr), frozen=True)
        for name, arr in self.geometry_enc.param_arrays().items():
            self.params.add(name, Tensor(arr), frozen=True)
        for key, tensor in self.clip_adapter.tensors().items():
            self.params.add(f"clip_adapter.{key}", tensor)
        for k, sub in enumerate(self.hier_adapter.sub_adapters):
            for key, tensor in sub.tensors().items():
                self.params.add(f"hier_adapter.{k}.{key}", tensor)
        for name, tensor in init_decoder_params(dec_cfg, rng).items():
            self.params.add(name, tensor)

    # -- construction ----------------------------------------------------

    @classmethod
    def build(cls, seed: int = 0, variant: str = "ha4",
              enc_cfg: EncoderConfig | None = None,
              dec_cfg: DecoderConfig | None = None,
              fusion_cfg: FusionConfig | None = None,
              vocab: Vocab | None = None) -> "FusedModel":
        vocab = vocab or datamod.task_vocab()
        enc_cfg = enc_cfg or EncoderConfig(seed=seed)
        dec_cfg = dec_cfg or DecoderConfig(vocab_size=len(vocab))
        fusion_cfg = fusion_cfg or FusionConfig()
        return cls(enc_cfg, dec_cfg, fusion_cfg, vocab, variant, seed)

    def apply_lora(self, cfg: LoRAConfig) -> None:
        if self.lora is not None:
            raise ConfigError("model is already LoRA-wrapped")
        lora_wrap(self.params, cfg, rng_for(self.seed, "lora-init"))
        self.lora = cfg

    # -- forward paths -----------------------------------------------------

    def lm_params(self):
        """Decoder parameter view with low-rank composition applied."""
        return lm_view(self.params, self.lora)

    def visual_embedding(self, img: np.ndarray, rng=None, training: bool = False):
        blocks = self.geometry_enc.encode(img)
        sem = self.semantic_enc.encode(img) if self.fusion_cfg.clip_branch_enabled else None
        return fuse_visual_features(sem, blocks, self.clip_adapter, self.hier_adapter,
                                    self.fusion_cfg, rng=rng, training=training)

    def visual_embedding_cached(self, sem_tokens, blocks, rng=None,
                                training: bool = False, cfg: FusionConfig | None = None):
        """Fusion from precomputed encoder outputs (training-loop fast path)."""
        return fuse_visual_features(sem_tokens, blocks, self.clip_adapter,
                                    self.hier_adapter, cfg or self.fusion_cfg,
                                    rng=rng, training=training)

    def prompt_sequence(self, img, question_ids: list[int], rng=None,
                        training: bool = False, lm_params=None):
        lm_params = lm_params or self.lm_params()
        vis = self.visual_embedding(img, rng=rng, training=training)
        txt = embed_text(lm_params["lm.embed"], question_ids)
        return splice_input(vis, txt)

    def sequence_loss(self, img, question_ids: list[int], answer_ids: list[int],
                      rng=None, training: bool = False, lm_params=None):
        lm_params = lm_params or self.lm_params()
        prompt = self.prompt_sequence(img, question_ids, rng=rng,
                                      training=training, lm_params=lm_params)
        return autoregressive_loss(lm_params, self.dec_cfg, prompt, answer_ids)

    def answer(self, img, question: str, max_new: int = 4) -> str:
        """Greedy-decode an answer string for one image/question pair."""
        lm_params = self.lm_params()
        ids = self.vocab.encode(question)
        prompt = self.prompt_sequence(img, ids, training=False, lm_params=lm_params)
        out = generate_greedy(lm_params, self.dec_cfg, prompt, max_new, self.vocab.eos_id)
        return self.vocab.decode(out)

    # -- serialization ------------------------------------------------------

    def config_meta(self) -> dict:
        return {
            "enc": {"image_side": self.enc_cfg.image_side,
                    "patch_size": self.enc_cfg.patch_size,
                    "d_sem": self.enc_cfg.d_sem, "d_geo": self.enc_cfg.d_geo,
                    "n_blocks": self.enc_cfg.n_blocks, "seed": self.enc_cfg.seed},
            "dec": {"n_layers": self.dec_cfg.n_layers, "d_model": self.dec_cfg.d_model,
                    "n_heads": self.dec_cfg.n_heads, "max_len": self.dec_cfg.max_len,
                    "vocab_size": self.dec_cfg.vocab_size,
                    "mlp_hidden": self.dec_cfg.mlp_hidden},
            "fusion": {"drop_probability": self.fusion_cfg.drop_probability,
                       "interleave_order": self.fusion_cfg.interleave_order,
                       "clip_branch_enabled": self.fusion_cfg.clip_branch_enabled,
                       "geometry_branch_enabled": self.fusion_cfg.geometry_branch_enabled},
            "lora": None if self.lora is None else {
                "rank": self.lora.rank, "alpha": self.lora.alpha,
                "targets": list(self.lora.targets)},
            "variant": self.variant,
            "seed": self.seed,
            "vocab": self.vocab.tokens,
            "completed_stages": sorted(self.completed_stages),
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "FusedModel":
        enc_cfg = EncoderConfig(**meta["enc"])
        dec_cfg = DecoderConfig(**meta["dec"])
        fusion_cfg = FusionConfig(**meta["fusion"])
        vocab = Vocab(list(meta["vocab"]))
        model = cls(enc_cfg, dec_cfg, fusion_cfg, vocab, meta["variant"], meta["seed"])
        if meta.get("lora"):
            model.apply_lora(LoRAConfig(rank=meta["lora"]["rank"],
                                        alpha=meta["lora"]["alpha"],
                                        targets=tuple(meta["lora"]["targets"])))
        model.completed_stages = set(meta.get("completed_stages", []))
        return model

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        """Overwrite parameter values from a checkpoint tensor map."""
        for name, arr in arrays.items():
            if name.startswith("opt."):
                continue
            if name not in self.params:
                raise ConfigError(f"checkpoint tensor '{name}' not in this model")
            tgt = self.params[name]
            if tgt.shape != arr.shape:
                raise ConfigError(f"shape mismatch for '{name}': "
                                  f"{tgt.shape} vs {arr.shape}")
            tgt.data = arr.astype(np.float64).copy()
