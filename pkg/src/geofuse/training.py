"""Two-stage optimization schedule with freezing, feature dropping, low-rank
fine-tuning, and deterministic checkpointing.

Stage 1 ("feature alignment") updates only the hierarchical-adapter
parameters; the semantic-branch adapter and the whole language model stay
bit-identical. Stage 2 ("instruction fine-tuning") trains both adapters and
the language model -- through low-rank factors when configured -- and applies
per-sample semantic-branch dropping at the configured probability.

Every source of randomness is re-derived from ``(seed, purpose, stage,
epoch[, sample])``, so resuming from any epoch checkpoint reproduces the
uninterrupted run's remaining losses exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .checkpoint import read_checkpoint, write_checkpoint
from .data import VQARecord, render_scene
from .errors import ConfigError, LoadError, StateError
from .lm import LoRAConfig
from .model import FusedModel
from .optim import AdamW, ParamSet
from .util import rng_for

CHECKPOINT_KIND = "geofuse-train"


@dataclass(frozen=True)
class StageSpec:
    """One stage's schedule: selectors, data reference, and hyperparameters."""

    stage: int
    trainable: tuple[str, ...]
    frozen: tuple[str, ...] = ()
    dataset: str | None = None
    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 0.0
    drop_probability: float = 0.0
    lora: LoRAConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigError("stage must be 1 or 2")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")


def stage1_spec(seed: int = 0, **overrides) -> StageSpec:
    base = StageSpec(stage=1, trainable=("hier_adapter.*",),
                     frozen=("clip_adapter.*", "lm.*", "encoder.*"),
                     epochs=overrides.pop("epochs", 6),
                     drop_probability=0.0, seed=seed)
    return replace(base, **overrides)


def stage2_spec(model: FusedModel, seed: int = 0, lora: LoRAConfig | None = None,
                **overrides) -> StageSpec:
    """Stage-2 selectors derived from the model's branch configuration.

    With low-rank factors configured, only the factors train inside the
    language model (base matrices stay bit-identical); otherwise the whole
    ``lm.*`` namespace trains. A disabled semantic branch leaves its adapter
    out of the gradient graph, so it is excluded from the trainable set.
    """
    trainable = ["hier_adapter.*"]
    if model.fusion_cfg.clip_branch_enabled:
        trainable.append("clip_adapter.*")
    if lora is not None:
        trainable += ["lm.*.lora_a", "lm.*.lora_b"]
    else:
        trainable.append("lm.*")
    base = StageSpec(stage=2, trainable=tuple(trainable), frozen=("encoder.*",),
                     drop_probability=overrides.pop("drop_probability", 0.3),
                     lora=lora, seed=seed)
    return replace(base, **overrides)


def validate_stage_spec(spec: StageSpec, params: ParamSet) -> tuple[set[str], set[str]]:
    trainable = set(params.select(spec.trainable))
    frozen = set(params.select(spec.frozen))
    clash = trainable & frozen
    if clash:
        raise ConfigError(f"selectors overlap on: {sorted(clash)[:5]}")
    if not trainable:
        raise ConfigError(f"trainable selectors matched nothing: {spec.trainable}")
    for name in trainable:
        if name.startswith("encoder."):
            raise ConfigError("encoder parameters are never trainable")
        if spec.stage == 1 and (name.startswith("clip_adapter.") or name.startswith("lm.")):
            raise ConfigError(
                f"stage 1 trains the hierarchical adapter only; got '{name}'")
    return trainable, frozen


@dataclass
class TrainState:
    """Serializable optimizer/progress state for exact resume."""

    stage: int
    seed: int
    epoch: int = 0          # next epoch to run
    step: int = 0
    opt_t: int = 0
    loss_rows: list = field(default_factory=list)  # (step, stage, loss, drop_rate)
    _opt_arrays: dict = field(default_factory=dict, repr=False)


def _tokenized(model: FusedModel, records: list[VQARecord]):
    """Pre-render scenes and pre-encode through the frozen encoders once."""
    cache = []
    for rec in records:
        if rec.scene is None:
            raise ConfigError(f"record {rec.id} has no inline scene to render")
        img = render_scene(rec.scene, model.enc_cfg.image_side)
        sem = model.semantic_enc.encode(img) if model.fusion_cfg.clip_branch_enabled else None
        blocks = model.geometry_enc.encode(img)
        q_ids = model.vocab.encode(rec.question)
        a_ids = model.vocab.encode(rec.answer) + [model.vocab.eos_id]
        cache.append((sem, blocks, q_ids, a_ids))
    return cache


def _train(model: FusedModel, spec: StageSpec, records: list[VQARecord],
           state: TrainState | None = None, out_dir=None) -> TrainState:
    from .fusion import with_variant
    from .lm import autoregressive_loss, embed_text, splice_input

    if spec.lora is not None and model.lora is None:
        model.apply_lora(spec.lora)
    trainable, _ = validate_stage_spec(spec, model.params)
    model.params.set_frozen_exactly(set(model.params.names()) - trainable)

    opt = AdamW(model.params, lr=spec.lr, weight_decay=spec.weight_decay)
    if state is None:
        state = TrainState(stage=spec.stage, seed=spec.seed)
    else:
        if state.stage != spec.stage:
            raise StateError(f"resume state is for stage {state.stage}, spec is stage {spec.stage}")
        opt.t = state.opt_t
        if state._opt_arrays:
            opt.load_state(state.opt_t, state._opt_arrays)

    cache = _tokenized(model, records)
    run_cfg = with_variant(model.fusion_cfg, drop_probability=spec.drop_probability)
    n = len(records)

    for epoch in range(state.epoch, spec.epochs):
        order = rng_for(spec.seed, "shuffle", spec.stage, epoch).permutation(n)
        for lo in range(0, n, spec.batch_size):
            batch = order[lo:lo + spec.batch_size]
            model.params.zero_grad()
            lm_params = model.lm_params()
            total = None
            dropped = 0
            for idx in batch:
                sem, blocks, q_ids, a_ids = cache[int(idx)]
                rng = rng_for(spec.seed, "drop", spec.stage, epoch, int(idx))
                vis = model.visual_embedding_cached(sem, blocks, rng=rng,
                                                    training=True, cfg=run_cfg)
                if any(vis.dropped):
                    dropped += 1
                prompt = splice_input(vis, embed_text(lm_params["lm.embed"], q_ids))
                loss = autoregressive_loss(lm_params, model.dec_cfg, prompt, a_ids)
                total = loss if total is None else total + loss
            mean_loss = total * (1.0 / len(batch))
            mean_loss.backward()
            opt.step()
            state.step += 1
            state.loss_rows.append((state.step, spec.stage, mean_loss.item(),
                                    dropped / len(batch)))
        state.epoch = epoch + 1
        state.opt_t = opt.t
        state._opt_arrays = opt.state_arrays()  # kept for epoch checkpoints
        if out_dir is not None:
            save_checkpoint(model, state, Path(out_dir) / f"checkpoint_epoch_{epoch:03d}.bin")

    state.opt_t = opt.t
    state._opt_arrays = opt.state_arrays()
    model.completed_stages.add(spec.stage)
    return state


def run_stage1(model: FusedModel, spec: StageSpec, records: list[VQARecord],
               state: TrainState | None = None, out_dir=None) -> TrainState:
    """Feature-alignment pre-training; only the hierarchical adapter moves."""
    if spec.stage != 1:
        raise ConfigError("run_stage1 requires a stage-1 spec")
    return _train(model, spec, records, state=state, out_dir=out_dir)


def run_stage2(model: FusedModel, spec: StageSpec, records: list[VQARecord],
               state: TrainState | None = None, out_dir=None) -> TrainState:
    """Instruction fine-tuning with per-sample semantic-branch dropping."""
    if spec.stage != 2:
        raise ConfigError("run_stage2 requires a stage-2 spec")
    if 1 not in model.completed_stages:
        raise StateError("stage 2 requires a completed stage-1 checkpoint")
    return _train(model, spec, records, state=state, out_dir=out_dir)


# -- checkpoint round-trip -----------------------------------------------------


def save_checkpoint(model: FusedModel, state: TrainState | None, path) -> None:
    """Write model parameters (plus optimizer state when given) bit-exactly."""
    arrays = {name: tensor.data for name, tensor in model.params.items()}
    meta = {"kind": CHECKPOINT_KIND, "model": model.config_meta(),
            "frozen": sorted(model.params.frozen_names)}
    if state is not None:
        arrays.update(state._opt_arrays)
        meta["state"] = {"stage": state.stage, "seed": state.seed,
                         "epoch": state.epoch, "step": state.step,
                         "opt_t": state.opt_t,
                         "loss_rows": [list(r) for r in state.loss_rows]}
    write_checkpoint(path, arrays, meta)


def load_checkpoint(path) -> tuple[FusedModel, TrainState | None]:
    arrays, meta = read_checkpoint(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise LoadError(f"not a training checkpoint: kind={meta.get('kind')!r}")
    model = FusedModel.from_meta(meta["model"])
    model.load_arrays(arrays)
    model.params.set_frozen_exactly(set(meta.get("frozen", [])))
    state = None
    if "state" in meta:
        s = meta["state"]
        state = TrainState(stage=s["stage"], seed=s["seed"], epoch=s["epoch"],
                           step=s["step"], opt_t=s["opt_t"],
                           loss_rows=[tuple(r) for r in s["loss_rows"]])
        state._opt_arrays = {k: v for k, v in arrays.items() if k.startswith("opt.")}
    return model, state


def write_loss_csv(rows, path) -> None:
    """Loss log: one row per optimizer step."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "stage", "loss", "drop_rate"])
        for step, stage, loss, rate in rows:
            writer.writerow([step, stage, repr(float(loss)), repr(float(rate))])
