"""Command-line entry points: gen-synth, train, eval, embed, gradcheck."""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from .config import ConfigError, SynthConfig, TrainerConfig, load_config
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, FormatError, gen_synthetic, load_features, save_features
from .metrics import evaluate
from .trainer import TrainingError, csv_header, embed as embed_features, train
from .validation import full_gradient_check


def _build_parser():
    parser = argparse.ArgumentParser(prog="drml",
                                     description="ensemble metric learning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, dataset=False, checkpoint=False, out=False):
        p.add_argument("--config", help="config file path")
        p.add_argument("--seed", type=int, help="override the configured seed")
        if dataset:
            p.add_argument("--dataset", required=True, help="FMAT feature file")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint file")
        if out:
            p.add_argument("--out", required=True, help="output path")

    p = sub.add_parser("gen-synth", help="write a synthetic labeled dataset")
    common(p, out=True)

    p = sub.add_parser("train", help="train a model on a labeled dataset")
    common(p, dataset=True, out=True)
    p.add_argument("--steps", type=int, help="override the configured step count")
    p.add_argument("--k", type=int, help="override the number of branches")
    p.add_argument("--loss", choices=["triplet", "margin", "proxy-anchor"])
    p.add_argument("--sampler", choices=["semi-hard", "distance-weighted", "random"])
    p.add_argument("--log", help="step log path (default: <out>.log.csv)")

    p = sub.add_parser("eval", help="evaluate a checkpoint or an embedding dump")
    common(p, dataset=True)
    p.add_argument("--checkpoint", help="checkpoint; omit to treat the dataset "
                                        "as a raw embedding dump")
    p.add_argument("--out", help="also write key=value lines to this path")

    p = sub.add_parser("embed", help="write embeddings for a dataset")
    common(p, dataset=True, checkpoint=True, out=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of the objective")
    p.add_argument("--seed", type=int, default=7)
    return parser


def _load_configs(args) -> tuple[TrainerConfig, SynthConfig]:
    if getattr(args, "config", None):
        trainer_cfg, synth_cfg = load_config(args.config)
    else:
        trainer_cfg, synth_cfg = TrainerConfig(), SynthConfig()
    if getattr(args, "seed", None) is not None:
        trainer_cfg = dataclasses.replace(trainer_cfg, seed=args.seed)
        synth_cfg = dataclasses.replace(synth_cfg, seed=args.seed)
    for attr, key in (("steps", "steps"), ("loss", "loss"), ("sampler", "sampler")):
        value = getattr(args, attr, None)
        if value is not None:
            trainer_cfg = dataclasses.replace(trainer_cfg, **{key: value})
    if getattr(args, "k", None) is not None:
        model = dataclasses.replace(trainer_cfg.model, n_branches=args.k)
        trainer_cfg = dataclasses.replace(trainer_cfg, model=model)
    return trainer_cfg, synth_cfg


def _cmd_gen_synth(args) -> int:
    _, synth_cfg = _load_configs(args)
    dataset = gen_synthetic(synth_cfg)
    save_features(args.out, dataset)
    print(f"wrote {len(dataset)} samples x {dataset.features.shape[1]} features "
          f"({synth_cfg.n_classes} classes) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg, _ = _load_configs(args)
    dataset = load_features(args.dataset)
    if dataset.labels is None:
        print("error: training dataset has no labels", file=sys.stderr)
        return 1
    if dataset.features.shape[1] != cfg.model.input_dim:
        print(f"error: dataset has {dataset.features.shape[1]} features but the "
              f"model expects {cfg.model.input_dim}; set model.input_dim",
              file=sys.stderr)
        return 1
    log_path = args.log or args.out + ".log.csv"
    lines = [csv_header(cfg.model.n_branches)]
    result = train(dataset.features, dataset.labels, cfg,
                   callback=lambda report, _: lines.append(report.csv_row()))
    save_checkpoint(args.out, result.params, cfg)
    with open(log_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"trained {cfg.steps} steps; checkpoint {args.out}, log {log_path}")
    return 0


def _report_lines(report):
    rows = [(k, f"{v:.6f}") for k, v in report.as_items()]
    width = max(len(k) for k, _ in rows)
    table = [f"{k:<{width}}  {v}" for k, v in rows]
    kv = [f"{k}={v}" for k, v in rows]
    return table, kv


def _cmd_eval(args) -> int:
    cfg, _ = _load_configs(args)
    dataset = load_features(args.dataset)
    if dataset.labels is None:
        print("error: evaluation needs labels", file=sys.stderr)
        return 1
    if args.checkpoint:
        params = load_checkpoint(args.checkpoint, cfg)
        embeddings = embed_features(params, dataset.features, cfg.model)
    else:
        embeddings = dataset.features
    report = evaluate(embeddings, dataset.labels, cluster_seed=cfg.seed)
    table, kv = _report_lines(report)
    print("\n".join(table))
    print("\n".join(kv))
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("\n".join(kv) + "\n")
    return 0


def _cmd_embed(args) -> int:
    cfg, _ = _load_configs(args)
    dataset = load_features(args.dataset)
    params = load_checkpoint(args.checkpoint, cfg)
    embeddings = embed_features(params, dataset.features, cfg.model)
    save_features(args.out, Dataset(embeddings, dataset.labels))
    print(f"wrote {len(embeddings)} embeddings of dim {embeddings.shape[1]} "
          f"to {args.out}")
    return 0


def _cmd_gradcheck(args) -> int:
    report = full_gradient_check(seed=args.seed)
    status = "ok" if report.ok and report.max_rel_error <= 1e-4 else "FAIL"
    print(f"gradcheck {status}: max relative error {report.max_rel_error:.3e} "
          f"({report.evaluations} evaluations)")
    if report.failure:
        print(f"failure: {report.failure}", file=sys.stderr)
    return 0 if status == "ok" else 1


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    handler = {
        "gen-synth": _cmd_gen_synth,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "embed": _cmd_embed,
        "gradcheck": _cmd_gradcheck,
    }[args.command]
    try:
        return handler(args)
    except (ConfigError, FormatError, TrainingError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
