"""Command line entry point (``cwdcil``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import resolve_config
from .errors import ConfigError, DatasetMissingError, NonFiniteLossError

EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_NONFINITE = 4


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=str, default=None, help="YAML experiment config")
    p.add_argument("--profile", choices=["desk", "full"], default=None, help="Default settings profile")
    p.add_argument("--seed", type=int, default=None, help="Run seed")
    p.add_argument("--out", type=str, default=None, help="Output directory")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="Dotted config override, e.g. train.war_weight=0.2 (repeatable)")


def _seeds(text: str) -> list[int]:
    return [int(s) for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cwdcil", description="Data-free class-incremental learning runner")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="Run one incremental experiment")
    _common(p)

    p = sub.add_parser("ablate", help="Run ablation / comparator variants over several seeds")
    _common(p)
    p.add_argument("--variants", default="cwd,cwd_minus_dce,cwd_minus_war,baseline",
                   help="Comma-separated variant names")
    p.add_argument("--seeds", default="0,1,2", help="Comma-separated seeds")

    p = sub.add_parser("sweep", help="Two-phase lambda_dce / lambda_war grid search")
    _common(p)
    p.add_argument("--seeds", default="0", help="Comma-separated seeds")

    p = sub.add_parser("consistency-report", help="KL between real and synthetic features")
    _common(p)
    p.add_argument("--checkpoint", default=None, help="Checkpoint directory of the model to invert")
    p.add_argument("--configs", default=None, help="Comma-separated inversion loss combinations")
    p.add_argument("--real-features", default=None, help="Real feature file (.npy/.csv, label last)")
    p.add_argument("--synth-features", default=None, help="Synthetic feature file (.npy/.csv, label last)")
    p.add_argument("--num-samples", type=int, default=100_000, help="Monte-Carlo samples")

    p = sub.add_parser("bias-experiment", help="Two-task classifier bias study")
    _common(p)
    p.add_argument("--schemes", default=None, help="Comma-separated schemes (default: all)")
    p.add_argument("--keep-war", action="store_true", help="Keep the norm regulariser on during task two")
    p.add_argument("--seeds", default="0", help="Comma-separated seeds")

    p = sub.add_parser("plot", help="Regenerate PNG plots from a run directory")
    p.add_argument("run_dir", help="Run output directory")
    return parser


def _consistency(args, cfg) -> list[dict]:
    from . import pipeline

    if args.real_features or args.synth_features:
        if not (args.real_features and args.synth_features):
            raise ConfigError("--real-features and --synth-features go together")
        return [pipeline.consistency_from_files(args.real_features, args.synth_features,
                                                args.num_samples, seed=cfg.seed)]
    if not args.checkpoint:
        raise ConfigError("consistency-report needs --checkpoint or a pair of feature files")
    from .checkpoint import load_checkpoint

    ckpt = load_checkpoint(args.checkpoint)
    tasks = pipeline.build_tasks(cfg)
    if list(tasks.class_order) != list(ckpt.class_order):
        raise ConfigError("checkpoint class order does not match the configured split")
    test_x, test_y = tasks.cumulative_test(ckpt.task_index)
    names = args.configs.split(",") if args.configs else None
    configs = pipeline.consistency_inversion_configs(cfg.inversion, names)
    return pipeline.run_consistency_report(ckpt.model, ckpt.stats, test_x, test_y, configs,
                                           num_samples=args.num_samples, seed=cfg.seed,
                                           out_scale=pipeline._out_scale(tasks))


def _dispatch(args) -> int:
    from . import pipeline

    if args.cmd == "plot":
        for path in pipeline.plot_run(args.run_dir):
            print(path)
        return 0
    cfg = resolve_config(args.config, args.override, args.profile, args.seed, args.out)
    out = Path(cfg.out_dir)
    if args.cmd == "run":
        rec = pipeline.run_experiment(cfg)
        print(json.dumps({"A_N": rec.last_accuracy, "accuracies": rec.accuracies}))
    elif args.cmd == "ablate":
        pipeline.run_ablation_suite(cfg, args.variants.split(","), _seeds(args.seeds))
        print((out / "ablation.md").read_text(), end="")
    elif args.cmd == "sweep":
        for row in pipeline.run_sweep(cfg, seeds=_seeds(args.seeds)):
            print(json.dumps(row))
    elif args.cmd == "consistency-report":
        reports = _consistency(args, cfg)
        out.mkdir(parents=True, exist_ok=True)
        (out / "consistency.json").write_text(json.dumps(reports, indent=2))
        print(json.dumps(reports, indent=2))
    elif args.cmd == "bias-experiment":
        schemes = args.schemes.split(",") if args.schemes else None
        results = pipeline.run_bias_experiment(cfg, schemes, _seeds(args.seeds), args.keep_war)
        summary = {s: [{"relative_gap": r.relative_gap, "mean_old": r.mean_old, "mean_new": r.mean_new}
                       for r in rs] for s, rs in results.items()}
        out.mkdir(parents=True, exist_ok=True)
        (out / "bias_summary.json").write_text(json.dumps(summary, indent=2))
        print(json.dumps(summary, indent=2))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DatasetMissingError as exc:
        print(f"dataset missing: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except NonFiniteLossError as exc:
        print(f"non-finite loss in stage '{exc.stage}': {exc}", file=sys.stderr)
        return EXIT_NONFINITE


if __name__ == "__main__":
    sys.exit(main())
