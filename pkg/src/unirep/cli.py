"""Command-line entry point: ``unirep {train,eval,gradcheck,report}``.

Exit codes: 0 success, 1 failed gradient check, 2 configuration error,
3 divergence, 4 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .config import load_config
from .errors import (
    CompatibilityError,
    ConfigError,
    ConfigurationError,
    DegenerateChannelError,
    DivergenceError,
    FormatError,
    GenerationError,
)

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 1, 2, 3, 4


def _train(args):
    from .experiment import run_training

    config = load_config(args.config)
    result = run_training(config, args.output, resume=args.resume, stop_at=args.stop_at)
    if result.summary is not None:
        print(json.dumps(result.summary, sort_keys=True))
    else:
        print(json.dumps({"type": "stopped", "step": result.step,
                          "output_dir": str(result.output_dir)}))
    return EXIT_OK


def _eval(args):
    from .experiment import run_eval

    config = load_config(args.config)
    print(json.dumps(run_eval(config, args.checkpoint, args.mode), sort_keys=True))
    return EXIT_OK


def _gradcheck(args):
    from .gradcheck import run_suite

    reports = run_suite(args.preset, np.dtype(args.dtype).type, args.seed)
    for r in reports:
        print(r.line())
    return EXIT_OK if all(r.ok for r in reports) else EXIT_CHECK


def _report(args):
    from .report import report

    print(report(args.files, args.layout))
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="unirep", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config file or run manifest")
    t.add_argument("--config", required=True)
    t.add_argument("--output", help="output directory (default: experiment.output_dir)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--stop-at", type=int, help="stop after this many steps and write a checkpoint")
    t.set_defaults(func=_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on every validation split")
    e.add_argument("--config", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--mode", choices=["frozen", "bn_plus"], default="frozen")
    e.set_defaults(func=_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer type and a whole model")
    g.add_argument("--preset", default="desk8")
    g.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_gradcheck)

    r = sub.add_parser("report", help="summary table over metrics files")
    r.add_argument("files", nargs="+")
    r.add_argument("--layout", choices=["sharing", "norm"], default="sharing")
    r.set_defaults(func=_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for v in exc.violations:
            print(f"  - {v}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigurationError, CompatibilityError, GenerationError, DegenerateChannelError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (OSError, FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
