"""Command-line entry points.

Subcommands: init-config, gen-data, train, score, report, gridsearch,
selftest.  Exit codes: 0 success, 2 configuration error, 3 missing
artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from . import experiment, selftest
from .experiment import ConfigError, MissingArtifactError
from .train import TrainingDivergedError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


def _add_common(p: argparse.ArgumentParser, *, config=True, job=False) -> None:
    if config:
        p.add_argument("--config", required=True, help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    if job:
        p.add_argument("--variant", default=None, help="autoencoder variant (default: all)")
        p.add_argument("--fold", type=int, default=None, help="fold index (default: all)")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="msrae",
        description="Sparse denoising autoencoder experiments on vessel phantoms")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write a default experiment config")
    p.add_argument("--out", default="config.json")
    p.add_argument("--full", action="store_true",
                   help="full-protocol preset instead of the desk-scale one")
    p.add_argument("--force", action="store_true")
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gen-data", help="generate the phantom cohort")
    _add_common(p)
    p.add_argument("--force", action="store_true", help="overwrite an existing cohort")

    p = sub.add_parser("train", help="train one or all (variant, fold) jobs")
    _add_common(p, job=True)
    p.add_argument("--full", action="store_true",
                   help="run the unscaled full training schedule")

    p = sub.add_parser("score", help="calibrate and score validation + test patches")
    _add_common(p, job=True)

    p = sub.add_parser("report", help="aggregate scores into curves and summary")
    _add_common(p)

    p = sub.add_parser("gridsearch", help="rank hyper-parameter grid points")
    _add_common(p)
    p.add_argument("--grid", default=None, help="JSON file with lam/gamma/alpha/sigma lists")

    sub.add_parser("selftest", help="run the built-in oracle suites")
    return parser


def _load_config(args) -> experiment.ExperimentConfig:
    cfg = experiment.load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, master_seed=args.seed,
                      cohort=replace(cfg.cohort, seed=args.seed))
    return cfg


def _cmd_init_config(args) -> int:
    if os.path.exists(args.out) and not args.force:
        raise ConfigError(f"{args.out} exists (use --force to overwrite)")
    seed = args.seed if args.seed is not None else 1337
    cfg = experiment.full_config(seed) if args.full else experiment.desk_config(seed)
    experiment.save_config(args.out, cfg)
    print(f"wrote {cfg.name} config to {args.out}")
    return EXIT_OK


def _cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    summary = experiment.run_gen_data(cfg, force=args.force)
    print(f"cohort written to {summary['path']}")
    print(f"subjects: {summary['n_subjects']}  folds: {summary['k_folds']}  "
          f"patches: {summary['n_patches']}")
    print("patches per target-grade stratum:")
    for key, count in summary["strata"].items():
        print(f"  {key}: {count}")
    print("subjects per split, by fold:")
    for f, sizes in enumerate(summary["fold_split_subjects"]):
        print(f"  fold {f}: train={sizes['train']} val={sizes['val']} test={sizes['test']}")
    return EXIT_OK


def _jobs_args(cfg, args):
    variants = [args.variant] if args.variant else None
    folds = [args.fold] if args.fold is not None else None
    return variants, folds


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    variants, folds = _jobs_args(cfg, args)
    done = experiment.run_jobs(cfg, "train", variants, folds,
                               jobs=args.jobs, full=args.full)
    for v, f in done:
        print(f"trained {v} fold {f} -> {experiment.job_dir(cfg, v, f)}")
    return EXIT_OK


def _cmd_score(args) -> int:
    cfg = _load_config(args)
    variants, folds = _jobs_args(cfg, args)
    done = experiment.run_jobs(cfg, "score", variants, folds, jobs=args.jobs)
    for v, f in done:
        print(f"scored {v} fold {f} -> {os.path.join(experiment.job_dir(cfg, v, f), 'scores.csv')}")
    return EXIT_OK


def _cmd_report(args) -> int:
    cfg = _load_config(args)
    report = experiment.run_report(cfg)
    print(f"report written to {experiment.report_dir(cfg)}")
    for task_name, task in report["tasks"].items():
        print(f"task {task_name}:")
        for variant in cfg.variants:
            v = task["variants"][variant]
            print(f"  {variant}: pooled AUC={v['pooled_auc']:.4f} "
                  f"AP={v['pooled_ap']:.4f} (n={v['n_pos']}+/{v['n_neg']}-)")
    return EXIT_OK


def _cmd_gridsearch(args) -> int:
    cfg = _load_config(args)
    grid = None
    if args.grid:
        if not os.path.exists(args.grid):
            raise ConfigError(f"grid file not found: {args.grid}")
        with open(args.grid) as fp:
            grid = json.load(fp)
    results = experiment.run_gridsearch(cfg, grid)
    out_dir = experiment.report_dir(cfg)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "gridsearch.csv")
    experiment.write_gridsearch_csv(path, results)
    print(f"gridsearch table written to {path}")
    print("rank  lam      gamma    alpha  sigma  val_pooled_auc")
    for i, row in enumerate(results, start=1):
        print(f"{i:>4}  {row['lam']:<8} {row['gamma']:<8} {row['alpha']:<6} "
              f"{row['sigma']:<6} {row['val_pooled_auc']:.4f}")
    return EXIT_OK


def _cmd_selftest(args) -> int:
    failures = selftest.run()
    if failures:
        print(f"{failures} suite(s) failed")
        return EXIT_NUMERIC
    print("all selftest suites passed")
    return EXIT_OK


_COMMANDS = {
    "init-config": _cmd_init_config,
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "score": _cmd_score,
    "report": _cmd_report,
    "gridsearch": _cmd_gridsearch,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDivergedError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
