"""Command line entry point.

Exit codes: 0 success, 1 validation failure, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .corpus import CorpusError, Dataset, load_dataset
from .experiment import Experiment, ValidationFailure, render_report
from .perturb import PerturbError, load_hypotheses, word_error_rate

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("fewshot_slu")


def _config(args) -> ExperimentConfig:
    if not args.config:
        raise ValidationFailure(["--config is required"])
    cfg = load_config(args.config)
    if getattr(args, "out", None):
        cfg.output_dir = Path(args.out)
    if getattr(args, "workers", None):
        cfg.workers = args.workers
    if getattr(args, "seed", None):
        cfg.seeds = list(args.seed)
    return cfg


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def cmd_validate(args) -> int:
    summary = Experiment(_config(args)).validate()
    _print({"status": "ok", **summary})
    return EXIT_OK


def cmd_pretrain(args) -> int:
    exp = Experiment(_config(args))
    for seed in exp.config.seeds:
        path = exp.pretrain(seed, resume=args.resume, max_epochs=args.epochs)
        print(path)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    exp = Experiment(_config(args))
    if args.condition in ("clean", "asr"):
        conditions = [(args.condition, 0)]
    elif args.condition in ("remove", "replace"):
        if args.c is None:
            raise ValidationFailure([f"--c is required for condition {args.condition}"])
        conditions = [(args.condition, args.c)]
    else:
        # default: clean plus every configured perturbation
        conditions = [("clean", 0)] + [(p.mode, p.c) for p in exp.config.perturbations]
        if exp.config.hypotheses is not None:
            conditions.append(("asr", 0))
    for condition, c in conditions:
        _print(exp.evaluate(condition, c, checkpoint_override=args.checkpoint))
    return EXIT_OK


def cmd_sweep(args) -> int:
    exp = Experiment(_config(args))
    c_values = args.c_values or list(range(1, 6))
    _print(exp.sweep(args.mode, c_values, checkpoint_override=args.checkpoint))
    return EXIT_OK


def cmd_report(args) -> int:
    seeds = None
    if args.config:
        seeds = _config(args).seeds
        out = Path(args.out) if args.out else load_config(args.config).output_dir
    elif args.out:
        out = Path(args.out)
    else:
        raise ValidationFailure(["report needs --out or --config"])
    text, warnings = render_report(out, seeds)
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(text)
    if args.write:
        Path(args.write).write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_wer(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        if cfg.hypotheses is None:
            raise ValidationFailure(["config has no hypotheses file"])
        dataset_paths, hyp_path = cfg.datasets, cfg.hypotheses
    elif args.dataset and args.hypotheses:
        dataset_paths, hyp_path = [Path(args.dataset)], Path(args.hypotheses)
    else:
        raise ValidationFailure(["wer needs --config or both --dataset and --hypotheses"])
    utts = []
    for p in dataset_paths:
        utts.extend(load_dataset(p).utterances)
    wer, missing = word_error_rate(Dataset(tuple(utts)), load_hypotheses(hyp_path))
    _print({"wer": wer, "n_utterances": len(utts), "missing": missing})
    if missing:
        raise ValidationFailure([f"hypotheses missing for {len(missing)} ids: {missing}"])
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synthetic import generate

    out = Path(args.out or "synthetic")
    paths = generate(seed=args.data_seed).write(out)
    cfg = out / "experiment.ini"
    cfg.write_text(
        "[experiment]\n"
        f"datasets = {paths['dataset'].name}\n"
        f"manifest = {paths['manifest'].name}\n"
        f"embeddings = {paths['embeddings'].name}\n"
        "dataset_name = synthetic\n"
        f"learner = {args.learner}\n"
        "context = windowed-affine\n"
        "window = 3\n"
        "hidden_dim = 32\n"
        "seeds = 0, 1, 2\n"
        "perturbations = remove:1, replace:1\n"
        f"output_dir = runs/{args.learner}\n",
        encoding="utf-8",
    )
    print(cfg)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment INI file")
    common.add_argument("--seed", type=int, action="append", help="run seed (repeatable)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--workers", type=int, help="evaluation worker processes")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="fewshot-slu", description="Few-shot IC/SL robustness experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", parents=[common], help="check config, data and hypotheses")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("pretrain", parents=[common], help="pretrain one model per seed")
    p.add_argument("--resume", action="store_true", help="continue from an existing checkpoint")
    p.add_argument("--epochs", type=int, help="stop after this many epochs in total")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("evaluate", parents=[common], help="clean and perturbed evaluation")
    p.add_argument("--checkpoint", help="checkpoint path; may contain {seed}")
    p.add_argument("--condition", choices=["clean", "remove", "replace", "asr"])
    p.add_argument("--c", type=int, help="examples per intent to remove or replace")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", parents=[common], help="paired evaluation over several c")
    p.add_argument("--checkpoint", help="checkpoint path; may contain {seed}")
    p.add_argument("--mode", choices=["remove", "replace"], required=True)
    p.add_argument("--c", dest="c_values", type=int, action="append", help="repeatable; default 1..5")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", parents=[common], help="render markdown tables")
    p.add_argument("--write", help="also write the markdown to this file")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("wer", parents=[common], help="hypothesis coverage and word error rate")
    p.add_argument("--dataset")
    p.add_argument("--hypotheses")
    p.set_defaults(func=cmd_wer)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic benchmark and a config")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--learner", default="proto", choices=["proto", "fomaml", "finetune"])
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ValidationFailure as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return EXIT_INVALID
    except (ConfigError, CorpusError, PerturbError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level boundary
        log.debug("runtime error", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
