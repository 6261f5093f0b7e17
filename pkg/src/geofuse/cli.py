"""Command-line entry point.

Subcommands:

    make-data   generate a synthetic dataset (JSONL + sample scene images)
    train       run training stage 1 or 2, write checkpoints + loss CSV/figure
    eval        answer a dataset with a checkpoint, score, write reports
    score       re-score an answers file against ground truth (no model)
    diagnose    pooled-similarity probe over matched scene pairs

Every subcommand is deterministic given (config, seed): re-running writes
byte-identical artifacts, except the ``run_meta.json`` sidecar which carries
timestamps. Exit codes: 0 success, 1 usage/config error, 2 data error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import data as datamod
from . import scoring
from .encoders import save_ppm
from .errors import (ConfigError, ContractError, DataError, GeofuseError,
                     LoadError, StateError)
from .fusion import FusionConfig
from .lm import LoRAConfig
from .model import FusedModel
from .tensor import no_grad
from .util import canonical_json

ENV_OUT_ROOT = "GEOFUSE_OUT"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="geofuse", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None, help="output directory "
                       f"(default: $" + ENV_OUT_ROOT + "/<command> or ./out/<command>)")
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key")

    p = sub.add_parser("make-data", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--count", type=int, default=200)

    p = sub.add_parser("train", help="run one training stage")
    common(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--data", required=True, help="dataset JSONL")
    p.add_argument("--from", dest="from_ckpt", default=None,
                   help="stage-1 checkpoint (required for --stage 2)")
    p.add_argument("--variant", choices=("sa", "ha3", "ha4", "ha5"), default=None,
                   help="adapter variant (stage 1 default: ha4; stage 2 inherits "
                        "the checkpoint)")
    p.add_argument("--drop", choices=("on", "off"), default="on")
    p.add_argument("--clip", choices=("on", "off"), default="on")
    p.add_argument("--geo", choices=("on", "off"), default="on")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--lora", choices=("on", "off"), default="on",
                   help="low-rank fine-tuning in stage 2")

    p = sub.add_parser("eval", help="generate answers with a checkpoint and score them")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset JSONL")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--max-new", type=int, default=4)

    p = sub.add_parser("score", help="score an answers JSONL against ground truth")
    common(p)
    p.add_argument("--answers", required=True, help="JSONL with {id, answer}")
    p.add_argument("--data", required=True, help="ground-truth dataset JSONL")

    p = sub.add_parser("diagnose", help="similarity probe over matched pairs")
    common(p)
    p.add_argument("--pairs", type=int, default=100)

    return parser


def _out_dir(args) -> Path:
    if args.out:
        base = Path(args.out)
    else:
        root = os.environ.get(ENV_OUT_ROOT, "out")
        base = Path(root) / args.command
    base.mkdir(parents=True, exist_ok=True)
    return base


def _load_config(args) -> dict:
    cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        try:
            cfg[key] = json.loads(value)
        except json.JSONDecodeError:
            cfg[key] = value
    return cfg


def _write_meta(out: Path, args, started: float, extra: dict | None = None) -> None:
    """The only artifact allowed to differ between identical re-runs."""
    meta = {"command": args.command, "argv": sys.argv[1:],
            "started_unix": started, "duration_s": time.time() - started}
    if extra:
        meta.update(extra)
    (out / "run_meta.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def _write_csv(path: Path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        csv.writer(fh).writerows(rows)


# -- subcommands ---------------------------------------------------------------


def cmd_make_data(args) -> int:
    started = time.time()
    out = _out_dir(args)
    cfg = _load_config(args)
    count = int(cfg.get("count", args.count))
    pairs = datamod.generate_synth_dataset(count, args.seed)
    records = [rec for _, rec in pairs]
    datamod.write_jsonl(records, out / "dataset.jsonl")
    scenes_dir = out / "scenes"
    scenes_dir.mkdir(exist_ok=True)
    for img, rec in pairs[:4]:
        save_ppm(img, scenes_dir / f"{rec.id}.ppm")
    _write_meta(out, args, started, {"records": len(records)})
    print(f"wrote {len(records)} records to {out / 'dataset.jsonl'}")
    return EXIT_OK


def _fusion_from_flags(args, drop_p: float) -> FusionConfig:
    return FusionConfig(drop_probability=drop_p,
                        clip_branch_enabled=args.clip == "on",
                        geometry_branch_enabled=args.geo == "on")


def cmd_train(args) -> int:
    from . import plots, training

    started = time.time()
    out = _out_dir(args)
    cfg = _load_config(args)
    records = datamod.read_jsonl(args.data)
    if not records:
        raise DataError("training dataset is empty")

    hp = {}
    for key in ("epochs", "batch_size", "lr"):
        value = getattr(args, key)
        if value is not None:
            hp[key] = value
        elif key in cfg:
            hp[key] = cfg[key]
    drop_p = 0.3 if args.drop == "on" else 0.0

    if args.stage == 1:
        model = FusedModel.build(seed=args.seed, variant=args.variant or "ha4",
                                 fusion_cfg=_fusion_from_flags(args, drop_p))
        spec = training.stage1_spec(seed=args.seed, dataset=str(args.data), **hp)
        state = training.run_stage1(model, spec, records, out_dir=out)
    else:
        if not args.from_ckpt:
            raise ConfigError("--stage 2 requires --from <stage-1 checkpoint>")
        model, _ = training.load_checkpoint(args.from_ckpt)
        if args.variant is not None and model.variant != args.variant:
            raise ConfigError(f"checkpoint was trained with variant "
                              f"{model.variant!r}, not {args.variant!r}")
        model.fusion_cfg = _fusion_from_flags(args, drop_p)
        lora = None
        if args.lora == "on":
            lora_cfg = cfg.get("lora", {})
            lora = LoRAConfig(rank=int(lora_cfg.get("rank", 8)),
                              alpha=float(lora_cfg.get("alpha", 16.0)))
        spec = training.stage2_spec(model, seed=args.seed, lora=lora,
                                    dataset=str(args.data),
                                    drop_probability=drop_p, **hp)
        state = training.run_stage2(model, spec, records, out_dir=out)

    training.save_checkpoint(model, state, out / "checkpoint_final.bin")
    training.write_loss_csv(state.loss_rows, out / "loss.csv")
    plots.render_loss_curve(state.loss_rows, out / "loss_curve.png")
    _write_meta(out, args, started, {"stage": args.stage, "steps": state.step})
    print(f"stage {args.stage} done: {state.step} steps, "
          f"final loss {state.loss_rows[-1][2]:.4f}" if state.loss_rows
          else f"stage {args.stage} done: no steps")
    return EXIT_OK


def _check_dataset(path) -> None:
    violations = datamod.validate_jsonl(path)
    if violations:
        ids = sorted({v.record_id for v in violations})
        for v in violations[:20]:
            print(f"line {v.line} [{v.record_id}] {v.field}: {v.message}", file=sys.stderr)
        raise DataError(f"{len(violations)} schema violations in {path}; "
                        f"records: {', '.join(ids[:10])}")


def _write_report(out: Path, report: scoring.Report) -> None:
    from . import plots

    (out / "report.json").write_text(canonical_json(report.to_json()) + "\n",
                                     encoding="utf-8")
    _write_csv(out / "report_by_category.csv", scoring.report_csv_rows(report))
    _write_csv(out / "accuracy_plot_data.csv", scoring.plot_csv_rows(report))
    plots.render_category_accuracy(report, out / "accuracy_by_category.png")


def cmd_eval(args) -> int:
    from . import training

    started = time.time()
    out = _out_dir(args)
    _load_config(args)
    if not Path(args.data).exists():
        raise ConfigError(f"dataset not found: {args.data}")
    _check_dataset(args.data)
    records = datamod.read_jsonl(args.data)
    if not records:
        raise DataError("evaluation dataset is empty")
    model, _ = training.load_checkpoint(args.checkpoint)

    def answer_one(rec: datamod.VQARecord) -> str:
        if rec.scene is None:
            raise DataError(f"record {rec.id} has no inline scene")
        img = datamod.render_scene(rec.scene, model.enc_cfg.image_side)
        with no_grad():
            return model.answer(img, rec.question, max_new=args.max_new)

    workers = max(1, int(args.workers))
    if workers == 1:
        answers = [answer_one(rec) for rec in records]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            answers = list(pool.map(answer_one, records))

    with open(out / "answers.jsonl", "w", encoding="utf-8") as fh:
        for rec, ans in zip(records, answers):
            fh.write(json.dumps({"id": rec.id, "answer": ans}, sort_keys=True) + "\n")

    eval_records = scoring.eval_records_from_jsonl(
        args.data, answers={rec.id: ans for rec, ans in zip(records, answers)})
    report = scoring.aggregate([scoring.score_record(r) for r in eval_records])
    _write_report(out, report)
    _write_meta(out, args, started, {"records": len(records)})
    print(f"evaluated {len(records)} records: average accuracy "
          f"{report.average_accuracy:.2f}%, parse failures {report.parse_failures}")
    return EXIT_OK


def cmd_score(args) -> int:
    started = time.time()
    out = _out_dir(args)
    _load_config(args)
    _check_dataset(args.data)
    answers: dict[str, str] = {}
    with open(args.answers, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
                answers[str(doc["id"])] = str(doc["answer"])
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"answers line {line_no}: {exc}") from exc
    eval_records = scoring.eval_records_from_jsonl(args.data, answers=answers)
    if not eval_records:
        raise DataError("ground-truth dataset is empty")
    report = scoring.aggregate([scoring.score_record(r) for r in eval_records])
    _write_report(out, report)
    _write_meta(out, args, started, {"records": len(eval_records)})
    print(f"scored {len(eval_records)} records: average accuracy "
          f"{report.average_accuracy:.2f}%")
    return EXIT_OK


def cmd_diagnose(args) -> int:
    from . import diagnostics, plots
    from .encoders import EncoderConfig, GeometryEncoder, SemanticEncoder

    started = time.time()
    out = _out_dir(args)
    cfg = _load_config(args)
    n_pairs = int(cfg.get("pairs", args.pairs))
    enc_cfg = EncoderConfig(seed=args.seed)
    sem_enc, geo_enc = SemanticEncoder(enc_cfg), GeometryEncoder(enc_cfg)
    probe = diagnostics.SimilarityProbe(
        taps=(diagnostics.SEMANTIC_TAP,
              *(diagnostics.geometry_tap(i) for i in range(enc_cfg.n_blocks - 4,
                                                           enc_cfg.n_blocks))))
    pairs = [(r1.id.rsplit("-", 1)[0], i1, i2)
             for i1, i2, r1, _ in datamod.matched_pairs(n_pairs, args.seed,
                                                        enc_cfg.image_side)]
    rows, summary = diagnostics.probe_pairs(pairs, probe, sem_enc, geo_enc)
    _write_csv(out / "similarity.csv",
               [("pair_id", "encoder_tap", "similarity")]
               + [(pid, tap, repr(val)) for pid, tap, val in rows])
    _write_csv(out / "similarity_summary.csv",
               [("encoder_tap", "mean_similarity")]
               + [(tap, repr(val)) for tap, val in summary.items()])
    plots.render_similarity_summary(summary, out / "similarity_summary.png")
    _write_meta(out, args, started, {"pairs": n_pairs})
    contrast = summary[diagnostics.SEMANTIC_TAP] - summary[
        diagnostics.geometry_tap(enc_cfg.n_blocks - 1)]
    print(f"probed {n_pairs} matched pairs: semantic-vs-deep-geometry "
          f"contrast {contrast:.3f}")
    return EXIT_OK


_COMMANDS = {"make-data": cmd_make_data, "train": cmd_train, "eval": cmd_eval,
             "score": cmd_score, "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except (ConfigError, StateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, LoadError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ContractError, GeofuseError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
