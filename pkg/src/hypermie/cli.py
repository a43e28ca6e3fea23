"""Command-line interface: data generation, splitting, training, evaluation,
synthesis export, and gradient checking, all reproducible from a config file.

Config files are flat JSON mirroring the training-config field names; flags
override file values, and the HYPERMIE_SEED environment variable may supply
only the seed (lowest precedence below flags and config). Logs are
line-oriented JSON. Exit codes: 0 success, 1 validation or config error,
2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import engine
from .data import (
    GeneratorSpec,
    GzslSplit,
    generate_synthetic_corpus,
    gzsl_split,
    read_bundle,
    write_bundle,
    write_feature_block,
)
from .errors import NumericsError, ValidationError
from .fusion import Task
from . import cvae
from . import numerics as nm

SEED_ENV_VAR = "HYPERMIE_SEED"


def _emit(payload: dict) -> None:
    print(json.dumps(payload))


def _env_seed() -> int | None:
    raw = os.environ.get(SEED_ENV_VAR)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ValidationError(f"{SEED_ENV_VAR} must be an integer, got {raw!r}")


def _resolve_seed(flag_seed, config_seed=None, default=0) -> int:
    if flag_seed is not None:
        return int(flag_seed)
    if config_seed is not None:
        return int(config_seed)
    env = _env_seed()
    if env is not None:
        return env
    return default


def _load_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ValidationError(f"missing input file: {path}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed JSON in {path}: {exc}")


def _load_bundle(path):
    if not Path(path).exists():
        raise ValidationError(f"missing bundle file: {path}")
    return read_bundle(path)


def _load_split(path) -> GzslSplit:
    return GzslSplit.from_jsonable(_load_json(path))


def _load_config(args) -> engine.TrainConfig:
    payload = _load_json(args.config) if args.config else {}
    cfg = engine.TrainConfig.from_jsonable(payload)
    cfg.seed = _resolve_seed(getattr(args, "seed", None), payload.get("seed"))
    return cfg.validate()


def cmd_gen_data(args) -> int:
    payload = _load_json(args.spec) if args.spec else {}
    spec = GeneratorSpec.from_jsonable(payload)
    seed = _resolve_seed(args.seed, payload.get("seed"), default=spec.seed)
    spec.seed = seed
    bundle = generate_synthetic_corpus(spec)
    write_bundle(bundle, args.out, fmt=args.format)
    _emit(
        {
            "command": "gen-data",
            "out": str(args.out),
            "task": bundle.task.value,
            "categories": len(bundle.prototypes),
            "samples": len(bundle.samples),
            "seed": seed,
        }
    )
    return 0


def cmd_split(args) -> int:
    bundle = _load_bundle(args.bundle)
    counts = tuple(int(x) for x in args.counts.split(","))
    if len(counts) != 3:
        raise ValidationError("--counts must be three comma-separated integers")
    seed = _resolve_seed(args.seed)
    split = gzsl_split(
        bundle,
        counts,
        instance_ratio=args.instance_ratio,
        train_val_ratio=args.train_val_ratio,
        seed=seed,
    )
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(split.to_jsonable(), f, indent=2)
    _emit(
        {
            "command": "split",
            "out": str(args.out),
            "seen": split.seen_categories,
            "validation": split.val_categories,
            "unseen": split.unseen_categories,
            "train": len(split.train_ids),
            "val": len(split.val_ids),
            "test": len(split.test_ids),
            "seed": seed,
        }
    )
    return 0


def _train_once(bundle, split, cfg, out_dir: Path, log_lines: bool = True, resume_from=None):
    log_path = out_dir / f"train_log_seed{cfg.seed}.jsonl"
    with open(log_path, "w", encoding="utf-8") as log:

        def on_epoch(record):
            line = {
                "epoch": record.epoch,
                "loss": record.loss,
                "val": record.val_report,
                "gamma": record.gamma,
            }
            log.write(json.dumps(line) + "\n")
            if log_lines:
                _emit(line)

        result = engine.train(bundle, split, cfg, resume_from=resume_from, on_epoch=on_epoch)
    best_path = out_dir / f"best_seed{cfg.seed}.ckpt"
    last_path = out_dir / f"last_seed{cfg.seed}.ckpt"
    engine.save_checkpoint(result.best, best_path)
    engine.save_checkpoint(result.last, last_path)
    return result, best_path


def cmd_train(args) -> int:
    cfg = _load_config(args)
    bundle = _load_bundle(args.bundle)
    split = _load_split(args.split)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    if args.seeds is not None and args.seeds > 1:
        metrics: dict[str, list] = {}
        for offset in range(args.seeds):
            run_cfg = engine.TrainConfig.from_jsonable(
                {**_cfg_jsonable(cfg), "seed": cfg.seed + offset}
            )
            result, _ = _train_once(bundle, split, run_cfg, out_dir, log_lines=False)
            report = engine.evaluate(bundle, split, result.best, run_cfg, result.best.gamma)
            payload = report.to_jsonable()
            _emit({"command": "train", "seed": run_cfg.seed, "test": payload})
            for group in ("seen", "unseen"):
                for metric in ("accuracy", "f1"):
                    metrics.setdefault(f"{group}_{metric}", []).append(
                        payload[group][metric] or 0.0
                    )
            for metric in ("accuracy", "f1"):
                metrics.setdefault(f"overall_{metric}", []).append(payload["overall"][metric])
        summary = {
            name: {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
            for name, vals in metrics.items()
        }
        _emit({"command": "train", "seeds": args.seeds, "summary": summary})
        with open(out_dir / "summary.json", "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2)
        return 0

    resume = engine.load_checkpoint(args.resume) if args.resume else None
    result, best_path = _train_once(bundle, split, cfg, out_dir, resume_from=resume)
    _emit(
        {
            "command": "train",
            "best_epoch": result.best_epoch,
            "gamma": result.best.gamma,
            "checkpoint": str(best_path),
            "config_hash": cfg.hash(),
        }
    )
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    bundle = _load_bundle(args.bundle)
    split = _load_split(args.split)
    ckpt = engine.load_checkpoint(args.checkpoint)
    gamma = args.gamma if args.gamma is not None else ckpt.gamma
    if gamma is None:
        raise ValidationError("no gamma available: pass --gamma or use a validated checkpoint")
    report = engine.evaluate(bundle, split, ckpt, cfg, gamma)
    payload = report.to_jsonable()
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
    if args.export_features:
        feats, labels = engine.export_test_features(bundle, split, ckpt, cfg)
        write_feature_block(
            args.export_features, feats, {"kind": "test-features", "labels": labels}
        )
    _emit({"command": "eval", "out": str(args.out), **payload})
    return 0


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    bundle = _load_bundle(args.bundle)
    split = _load_split(args.split)
    ckpt = engine.load_checkpoint(args.checkpoint)
    protos_unseen = bundle.prototypes.subset(
        [bundle.prototypes.index(n) for n in split.unseen_categories]
    )
    weights = engine.ModelWeights(ckpt.params)
    dec = engine._numpy_weights(weights).decoder
    seed = _resolve_seed(args.seed, cfg.seed)
    batch = cvae.synthesize_unseen(protos_unseen, args.k, nm.SeededRng(seed), dec)
    labels = [protos_unseen.names[i] for i in batch.labels]
    write_feature_block(
        args.out,
        nm.value_of(batch.features),
        {"kind": "synthetic-features", "labels": labels, "k": args.k, "seed": seed},
    )
    _emit({"command": "synth", "out": str(args.out), "rows": len(labels), "k": args.k})
    return 0


def cmd_gradcheck(args) -> int:
    seed = _resolve_seed(args.seed)
    report = engine.gradcheck_report(
        seed=seed, task=Task(args.task), corrupt=args.corrupt
    )
    for name, entry in report["losses"].items():
        _emit({"command": "gradcheck", "loss": name, **entry})
    _emit({"command": "gradcheck", "passed": report["passed"], "tolerance": report["tolerance"]})
    return 0 if report["passed"] else 2


def _cfg_jsonable(cfg: engine.TrainConfig) -> dict:
    from dataclasses import asdict

    return asdict(cfg)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hypermie",
        description="Generalized zero-shot multimodal extraction on embedding bundles",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic embedding bundle")
    p.add_argument("--spec", help="generator spec JSON file")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=("binary", "json"), default="binary")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("split", help="build a seen/validation/unseen category split")
    p.add_argument("--bundle", required=True)
    p.add_argument("--counts", required=True, help="seen,val,unseen category counts")
    p.add_argument("--instance-ratio", type=float, default=0.70)
    p.add_argument("--train-val-ratio", type=float, default=0.90)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model on a bundle + split")
    p.add_argument("--config", help="training config JSON file")
    p.add_argument("--bundle", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, help="run N seeds and report mean/std")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test portion")
    p.add_argument("--config", help="training config JSON file")
    p.add_argument("--bundle", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--gamma", type=float, help="override the checkpoint's calibration factor")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--export-features", help="also dump test-sample features to this path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="export decoder-synthesized unseen-category features")
    p.add_argument("--config", help="training config JSON file")
    p.add_argument("--bundle", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, default=1, help="synthetic samples per unseen category")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("gradcheck", help="check every loss gradient against central differences")
    p.add_argument("--seed", type=int)
    p.add_argument("--task", choices=("MET", "MRE"), default="MET")
    p.add_argument("--corrupt", help="self-test hook: perturb this parameter's gradient")
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericsError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
