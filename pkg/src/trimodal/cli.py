"""Command-line front end.

Subcommands: gen (cohort generation), train-mmg (stage 1), train-fusion
(stage 2), cv (k-fold cross-validation with ablation modes), verify
(self-check suite).  Exit codes: 0 success, 1 failed verification or
runtime error, 2 invalid configuration, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import ConfigError, RunConfig, config_hash, dump_defaults, load_config

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_IO = 3

ABLATION_MODES = {
    "none": (False, False),
    "mmg_only": (True, False),
    "tcaf_only": (False, True),
    "mmg_tcaf": (True, True),
}


def build_parser():
    p = argparse.ArgumentParser(
        prog="trimodal",
        description="Triple-modal conversion pipeline on seeded synthetic cohorts")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, needs_cohort=False):
        sp.add_argument("--config", metavar="PATH", help="YAML run configuration")
        sp.add_argument("--seed", type=int, metavar="U64", help="override every seed in the config")
        sp.add_argument("--out", metavar="DIR", help="output directory (overrides config out_dir)")
        if needs_cohort:
            sp.add_argument("--cohort", metavar="DIR",
                            help="existing cohort directory (default: generate into OUT/cohort)")

    sp = sub.add_parser("gen", help="generate a synthetic cohort")
    common(sp)
    sp.add_argument("--print-defaults", action="store_true",
                    help="print the canonical default config and exit")

    sp = sub.add_parser("train-mmg", help="stage 1: fit the PET generator")
    common(sp, needs_cohort=True)

    sp = sub.add_parser("train-fusion", help="stage 2: fit encoders + fusion + classifier")
    common(sp, needs_cohort=True)
    sp.add_argument("--mmg-ckpt", metavar="PATH",
                    help="stage-1 checkpoint for imputation (omit for zero-fill)")

    sp = sub.add_parser("cv", help="k-fold cross-validation")
    common(sp, needs_cohort=True)
    sp.add_argument("--ablation", choices=[*ABLATION_MODES, "all"], default=None,
                    help="fusion/imputation mode, or 'all' for the full grid")
    sp.add_argument("--parallel-folds", type=int, default=1, metavar="N",
                    help="fold processes to run concurrently (cv only)")

    sp = sub.add_parser("verify", help="run the named property suite")
    sp.add_argument("--mutate", metavar="NAME", default=None,
                    help="plant a known defect first (suite must then fail)")
    return p


def _load(args):
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    if args.seed is not None:
        if not (0 <= args.seed < 2 ** 64):
            raise ConfigError(f"--seed must be u64, got {args.seed}")
        cfg.cohort.seed = args.seed
        cfg.train.seed = args.seed
        cfg.validate()
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def _cohort_dir(args, cfg):
    return getattr(args, "cohort", None) or os.path.join(cfg.out_dir, "cohort")


def _ensure_cohort(args, cfg):
    """Load the cohort, generating it first when the directory is absent."""
    from .synthdata import generate_cohort, load_cohort

    cdir = _cohort_dir(args, cfg)
    if not os.path.exists(os.path.join(cdir, "manifest.csv")):
        generate_cohort(cfg.cohort, cdir)
    return load_cohort(cdir)


def cmd_gen(args):
    from .synthdata import generate_cohort

    if args.print_defaults:
        sys.stdout.write(dump_defaults())
        return EXIT_OK
    cfg = _load(args)
    summary = generate_cohort(cfg.cohort, os.path.join(cfg.out_dir, "cohort"))
    print(f"cohort written: {summary['n_subjects']} subjects "
          f"({summary['n_pmci']} pMCI / {summary['n_smci']} sMCI), "
          f"{summary['n_missing_pet']} missing PET")
    return EXIT_OK


def cmd_train_mmg(args):
    from .trainer import train_mmg

    cfg = _load(args)
    subjects = _ensure_cohort(args, cfg)
    _, history = train_mmg(subjects, cfg.train, out_dir=cfg.out_dir,
                           config_hash=config_hash(cfg))
    print(f"stage 1 done: {len(history)} epochs, final L1 {history[-1][1]:.4f} "
          f"(from {history[0][1]:.4f})")
    return EXIT_OK


def cmd_train_fusion(args):
    from .checkpoint import load_checkpoint
    from .mmg import MmgModel
    from .trainer import train_fusion

    cfg = _load(args)
    subjects = _ensure_cohort(args, cfg)
    mmg_model = None
    if args.mmg_ckpt:
        tensors, meta = load_checkpoint(args.mmg_ckpt)
        mmg_model = MmgModel(np.random.default_rng(0), cfg.train.mmg,
                             volume_shape=tuple(meta["volume_shape"]))
        mmg_model.load_state_dict(tensors)
    bundle = train_fusion(subjects, cfg.train, mmg_model, out_dir=cfg.out_dir,
                          config_hash=config_hash(cfg))
    print(f"stage 2 done: {len(bundle.history)} epochs, final total "
          f"{bundle.history[-1][1]:.4f} (from {bundle.history[0][1]:.4f})")
    return EXIT_OK


def cmd_cv(args):
    from dataclasses import replace

    from .trainer import run_cv

    cfg = _load(args)
    subjects = _ensure_cohort(args, cfg)
    modes = list(ABLATION_MODES) if args.ablation == "all" else [
        args.ablation or cfg.train.mode()]
    for mode in modes:
        use_mmg, use_tcaf = ABLATION_MODES[mode]
        cfg_mode = replace(cfg.train, use_mmg=use_mmg, use_tcaf=use_tcaf)
        report = run_cv_parallel(subjects, cfg_mode, cfg, args.parallel_folds)
        agg = report["aggregate"]
        print(f"[{mode}] AUC {agg['auc']['mean']:.3f}±{agg['auc']['std']:.3f}  "
              f"ACC {agg['acc']['mean']:.3f}±{agg['acc']['std']:.3f}  "
              f"({report['k_folds']} folds)")
    return EXIT_OK


def run_cv_parallel(subjects, train_cfg, run_cfg, n_procs):
    """run_cv, optionally with folds in separate processes.

    Parallel results are bit-identical to the sequential ones because each
    fold derives its seeds independently from the root seed.
    """
    from .trainer import run_cv

    if n_procs <= 1:
        return run_cv(subjects, train_cfg, out_dir=run_cfg.out_dir,
                      config_hash=config_hash(run_cfg))
    return _run_cv_processes(subjects, train_cfg, run_cfg, n_procs)


def _run_cv_processes(subjects, train_cfg, run_cfg, n_procs):
    import multiprocessing as mp

    from .trainer import METRIC_KEYS, run_cv_single_fold, write_report

    k = train_cfg.k_folds
    with mp.get_context("spawn").Pool(min(n_procs, k)) as pool:
        jobs = [(subjects, train_cfg, i, run_cfg.out_dir, config_hash(run_cfg))
                for i in range(k)]
        fold_rows = pool.starmap(run_cv_single_fold, jobs)
    aggregate = {}
    for key in METRIC_KEYS:
        vals = np.array([row[key] for row in fold_rows], dtype=np.float64)
        aggregate[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
    report = {
        "mode": train_cfg.mode(), "k_folds": k, "seed": int(train_cfg.seed),
        "config_hash": config_hash(run_cfg), "folds": fold_rows, "aggregate": aggregate,
    }
    os.makedirs(run_cfg.out_dir, exist_ok=True)
    write_report(report, os.path.join(run_cfg.out_dir, f"metrics_{train_cfg.mode()}.json"))
    return report


def cmd_verify(args):
    from .verify import run_all

    try:
        _, ok = run_all(mutate=args.mutate)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK if ok else EXIT_FAIL


def main(argv=None):
    args = build_parser().parse_args(argv)
    handlers = {
        "gen": cmd_gen,
        "train-mmg": cmd_train_mmg,
        "train-fusion": cmd_train_fusion,
        "cv": cmd_cv,
        "verify": cmd_verify,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
