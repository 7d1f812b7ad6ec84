"""Command-line entry point.

Subcommands: train, generate, evaluate, ablate-samplers, ablate-padding,
sweep-steps. Exit codes: 0 ok, 2 invalid config, 3 NaN abort, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

from .harness import (ConfigError, RunConfig, run_evaluate, run_generate,
                      run_training)
from .samplers import KINDS
from .training import TrainingDiverged

EXIT_CONFIG = 2
EXIT_NAN = 3
EXIT_IO = 4


def _load_config(args) -> RunConfig:
    if args.config:
        config = RunConfig.load(args.config)
    else:
        config = RunConfig()
    if args.set:
        config.apply_overrides(args.set)
    if args.seed is not None:
        config.seed = args.seed
        config.train.seed = args.seed
    if args.out:
        config.out_dir = args.out
    root = os.environ.get("CMGEN_OUT_ROOT")
    if root:
        config.out_dir = str(Path(root) / config.out_dir)
    return config


def cmd_train(args) -> int:
    config = _load_config(args)
    _, final = run_training(config, resume=args.resume)
    print(f"trained {config.train.total_steps} steps -> {final}")
    return 0


def cmd_generate(args) -> int:
    config = _load_config(args)
    samples, elapsed, path = run_generate(config, args.checkpoint,
                                          n_samples=args.n, steps=args.steps)
    print(f"wrote {len(samples)} samples ({elapsed:.2f}s) -> {path}")
    return 0


def cmd_evaluate(args) -> int:
    config = _load_config(args)
    results = run_evaluate(config, args.checkpoint,
                           allow_hash_mismatch=args.allow_hash_mismatch)
    for k, v in results.items():
        print(f"{k}: {v:.6g}")
    return 0


def _comparison_table(rows, header, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def cmd_ablate_samplers(args) -> int:
    base = _load_config(args)
    out = Path(base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for kind in KINDS:
        cfg = RunConfig.from_dict(base.to_dict())
        cfg.train.sampler = kind
        cfg.out_dir = str(out / f"sampler_{kind}")
        _, ckpt = run_training(cfg)
        results = run_evaluate(cfg, ckpt)
        rows.append([kind] + [f"{results[m]:.6g}" for m in sorted(results)]
                    + [cfg.hash()])
        metric_names = sorted(results)
    _comparison_table(rows, ["sampler"] + metric_names + ["config_hash"],
                      out / "ablate_samplers.csv")
    print(f"wrote {out / 'ablate_samplers.csv'}")
    return 0


def cmd_ablate_padding(args) -> int:
    base = _load_config(args)
    out = Path(base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for norm in ("l1", "l2"):
        for mode in ("include", "exclude"):
            cfg = RunConfig.from_dict(base.to_dict())
            cfg.train.loss_norm = norm
            cfg.train.padding_mode = mode
            cfg.out_dir = str(out / f"padding_{norm}_{mode}")
            _, ckpt = run_training(cfg)
            results = run_evaluate(cfg, ckpt)
            rows.append([norm, mode] + [f"{results[m]:.6g}" for m in sorted(results)]
                        + [cfg.hash()])
            metric_names = sorted(results)
    _comparison_table(rows, ["norm", "padding"] + metric_names + ["config_hash"],
                      out / "ablate_padding.csv")
    print(f"wrote {out / 'ablate_padding.csv'}")
    return 0


def cmd_sweep_steps(args) -> int:
    config = _load_config(args)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from .harness import build_run_dataset, evaluate_samples
    dataset = build_run_dataset(config)
    rows = []
    steps_list = [int(s) for s in args.steps.split(",")]
    for steps in steps_list:
        gen, elapsed, _ = run_generate(config, args.checkpoint, steps=steps)
        names = list(config.metrics) + ["rtf"]
        results = evaluate_samples(dataset, gen, names, synthesis_seconds=elapsed)
        rows.append([steps] + [f"{results[m]:.6g}" for m in sorted(results)]
                    + [config.hash()])
        metric_names = sorted(results)
    _comparison_table(rows, ["T"] + metric_names + ["config_hash"],
                      out / "sweep_steps.csv")
    print(f"wrote {out / 'sweep_steps.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cmgen",
                                     description="consistency-model generative engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--set", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted-path config override")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("generate", help="sample from a checkpoint")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("evaluate", help="metric report for a checkpoint")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--allow-hash-mismatch", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate-samplers", help="train/evaluate all sampler kinds")
    common(p)
    p.set_defaults(fn=cmd_ablate_samplers)

    p = sub.add_parser("ablate-padding", help="loss norm x padding mode matrix")
    common(p)
    p.set_defaults(fn=cmd_ablate_padding)

    p = sub.add_parser("sweep-steps", help="metrics per inference step count")
    common(p)
    p.add_argument("checkpoint")
    p.add_argument("--steps", default="1,2,4", help="comma-separated step counts")
    p.set_defaults(fn=cmd_sweep_steps)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}; diagnostics: {exc.diagnostics}",
              file=sys.stderr)
        return EXIT_NAN
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
