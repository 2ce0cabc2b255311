"""Command-line interface: the full pipeline as subcommands.

Exit codes: 0 success, 2 config error, 3 missing dependency, 4 numeric failure.
SCAMKIT_THREADS caps worker count for the pure per-frame stages.
"""

from __future__ import annotations

import argparse
import os
import sys


def _pin_blas_threads() -> None:
    # single-threaded BLAS keeps runs byte-deterministic and single-core
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, "1")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scamkit",
        description="Weakly supervised visual-audio fixation prediction on a "
                    "synthetic corpus: tags -> pseudofixations -> distilled "
                    "predictors -> saliency metrics.",
    )
    parser.add_argument("--config", help="key = value config file", default=None)
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", help="generate the synthetic visual-audio corpus")

    p = sub.add_parser("train-cls", help="train a classification net")
    p.add_argument("--net", required=True,
                   choices=["s", "sa", "st", "s+", "sa+", "st+"])
    p.add_argument("--stage", default="coarse", choices=["coarse", "fine"])

    sub.add_parser("train-switch", help="train the audio relevance switch")

    p = sub.add_parser("gen-pgt", help="generate pseudofixations")
    p.add_argument("--method", default=None, choices=["cam", "ac", "scam", "scam+"])

    p = sub.add_parser("train-fp", help="distill a fixation prediction net")
    p.add_argument("--net", required=True, choices=["sta", "sta+short", "sta+long"])

    p = sub.add_parser("predict", help="predict fixation maps on the held split")
    p.add_argument("--fuse", default=None, choices=["single", "final", "agg"])

    sub.add_parser("evaluate", help="score predictions: CSV + figures")

    sub.add_parser("gradcheck", help="finite-difference gradient verification")
    return parser


def _dispatch(args, cfg) -> int:
    from . import pipeline

    if args.command == "gen-data":
        info = pipeline.cmd_gen_data(cfg)
        print(f"gen-data: {info['sequences']} sequences, "
              f"{info['train']} train / {info['held']} held frames")
        return 0
    if args.command == "train-cls":
        info = pipeline.cmd_train_cls(cfg, args.net, args.stage)
        print(f"train-cls {info['net']}: train accuracy {info['train_accuracy']:.3f}")
        return 0
    if args.command == "train-switch":
        info = pipeline.cmd_train_switch(cfg)
        print(f"train-switch: gate accuracy train {info['train_gate_accuracy']:.3f} "
              f"held {info['held_gate_accuracy']:.3f}")
        return 0
    if args.command == "gen-pgt":
        info = pipeline.cmd_gen_pgt(cfg, args.method)
        print(f"gen-pgt {info['method']}: {info['frames']} pseudofixation maps")
        return 0
    if args.command == "train-fp":
        info = pipeline.cmd_train_fp(cfg, args.net)
        print(f"train-fp {info['net']}: best epoch {info['best_epoch']} "
              f"held CC {info['held_cc']:.3f}")
        return 0
    if args.command == "predict":
        info = pipeline.cmd_predict(cfg, args.fuse)
        print(f"predict {info['fuse']}: {info['frames']} maps")
        return 0
    if args.command == "evaluate":
        info = pipeline.cmd_evaluate(cfg)
        means = info["means"]
        print("evaluate means: " + "  ".join(f"{k}={v:.4f}" for k, v in sorted(means.items())))
        print(f"csv: {info['csv']}")
        for fig in info["figures"]:
            print(f"figure: {fig}")
        return 0
    if args.command == "gradcheck":
        from .opcheck import TOLERANCE, run_suite

        results = run_suite(seed=cfg.seed)
        worst = 0.0
        failed = 0
        for name, err, ok in results:
            worst = max(worst, err)
            if not ok:
                failed += 1
                print(f"FAIL {name}: rel err {err:.3e} > {TOLERANCE:.0e}")
        print(f"gradcheck: {len(results) - failed}/{len(results)} cases passed, "
              f"worst rel err {worst:.3e}")
        return 0 if failed == 0 else 4
    raise AssertionError(f"unhandled command {args.command}")


def main(argv=None) -> int:
    _pin_blas_threads()
    parser = _build_parser()
    args = parser.parse_args(argv)

    from .config import ConfigError, load_config
    from .metrics import MetricError
    from .serial import CheckpointError
    from .tensor import NumericError, ShapeError

    try:
        cfg = load_config(args.config, args.overrides)
        if getattr(args, "net", None):
            cfg.net = args.net
        if getattr(args, "stage", None):
            cfg.stage = args.stage
        if getattr(args, "method", None):
            cfg.method = args.method
        if getattr(args, "fuse", None):
            cfg.fuse = args.fuse
        cfg.validate()
        return _dispatch(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        from .pipeline import DependencyError

        if isinstance(exc, DependencyError):
            print(f"dependency error: {exc}", file=sys.stderr)
            return 3
        if isinstance(exc, (NumericError, ShapeError, MetricError, CheckpointError)):
            print(f"numeric failure: {exc}", file=sys.stderr)
            return 4
        raise


if __name__ == "__main__":
    sys.exit(main())
