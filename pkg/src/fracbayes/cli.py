"""Command-line entry point.

Subcommands: synth, invert, stats, forward, surrogate-test.  Exit codes:
0 on success, 2 for configuration errors, 3 for stage failures.
"""

from __future__ import annotations

import argparse
import sys
import traceback

import numpy as np

from . import pipeline
from .pipeline import ConfigError, StageFailure


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fracbayes",
        description="Bayesian inversion pipeline for 2-D time-fractional "
                    "diffusion")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--seed-override", action="append", default=[],
                       metavar="NAME=INT",
                       help="replace one named seed (data, snapshots, "
                            "training, chains); repeatable")

    p = sub.add_parser("synth", help="generate noisy synthetic data")
    common(p)

    p = sub.add_parser("invert", help="run the inversion stage sequence")
    common(p)
    p.add_argument("--stage-from", default=None,
                   help="resume from this stage using persisted artifacts")
    p.add_argument("--prior-based", action="store_true",
                   help="build the surrogate over the Gaussian prior "
                        "(Hermite basis) instead of the intermediate box")

    p = sub.add_parser("stats", help="recompute statistics from saved chains")
    common(p)
    p.add_argument("--prior-based", action="store_true")

    p = sub.add_parser("forward", help="one fine-grid transient solve")
    common(p)
    p.add_argument("--z-file", default=None,
                   help="CSV with one parameter value per line; defaults to "
                        "the prior mean")

    p = sub.add_parser("surrogate-test",
                       help="held-out error of the fitted surrogate")
    common(p)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--prior-based", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = pipeline.load_config(args.config)
        cfg = pipeline.apply_seed_overrides(cfg, args.seed_override)
        if args.command == "synth":
            pipeline.cmd_synth(cfg)
        elif args.command == "invert":
            pipeline.cmd_invert(cfg, stage_from=args.stage_from,
                                prior_based=args.prior_based)
        elif args.command == "stats":
            pipeline.cmd_stats(cfg, prior_based=args.prior_based)
        elif args.command == "forward":
            z = np.loadtxt(args.z_file) if args.z_file else None
            pipeline.cmd_forward(cfg, z=z)
        elif args.command == "surrogate-test":
            report = pipeline.cmd_surrogate_test(cfg, n_test=args.n_test,
                                                 prior_based=args.prior_based)
            print("held-out relative RMS error: %.4g" % report["relative_rms"])
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2
    except StageFailure as exc:
        print("stage failure: %s" % exc, file=sys.stderr)
        return 3
    except Exception as exc:
        traceback.print_exc()
        print("stage failure: %s" % exc, file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
