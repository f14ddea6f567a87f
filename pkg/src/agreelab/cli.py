"""Command-line entry point: ``agreelab {train,explain,agree,cartography,report,run}``.

Exit codes: 0 on success, 1 for missing or invalid input, 2 when training
diverges.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from agreelab import pipeline
from agreelab.agreement import CoverageError
from agreelab.data import DataError
from agreelab.model import ModelError
from agreelab.training import DivergenceError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="agreelab", description="Saliency-method agreement experiments.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat JSON run configuration")
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
    common.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--seed-override", type=str, default=None,
                        help="comma-separated seeds replacing the configured list")
    common.add_argument("--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train base and regularized models for every seed")
    sub.add_parser("explain", parents=[common], help="compute saliency maps for every trained model")
    sub.add_parser("agree", parents=[common], help="score agreement between saliency methods")
    sub.add_parser("cartography", parents=[common], help="training-dynamics groups and curvature statistics")
    sub.add_parser("report", parents=[common], help="summarize all tables")
    sub.add_parser("run", parents=[common], help="all stages in order")
    return parser


def _config(args) -> pipeline.RunConfig:
    config = pipeline.RunConfig.load(args.config) if args.config else pipeline.RunConfig()
    if args.seed_override:
        try:
            seeds = [int(s) for s in args.seed_override.split(",") if s.strip()]
        except ValueError:
            raise pipeline.ConfigError(f"bad --seed-override {args.seed_override!r}") from None
        config = config.with_seeds(seeds)
    return config


def _check_config_matches(args) -> None:
    """Later stages take the config from the manifest; a given --config must agree."""
    if not args.config and not args.seed_override:
        return
    manifest = pipeline.RunManifest.load(args.out)
    if _config(args).hash() != manifest.config_hash:
        raise pipeline.ConfigError("--config differs from the one used for training in this output directory")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    log = (lambda *a, **k: None) if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    try:
        if args.workers < 1:
            raise pipeline.ConfigError("--workers must be >= 1")
        if args.command == "train":
            pipeline.cmd_train(_config(args), args.out, args.workers, args.force, log)
        elif args.command == "run":
            headline = pipeline.run_all(_config(args), args.out, args.workers, args.force, log)
            print(json.dumps(headline, indent=2, sort_keys=True))
        else:
            _check_config_matches(args)
            if args.command == "explain":
                pipeline.cmd_explain(args.out, args.workers, args.force, log)
            elif args.command == "agree":
                pipeline.cmd_agree(args.out, args.force, log)
            elif args.command == "cartography":
                pipeline.cmd_cartography(args.out, args.force, log)
            else:
                print(json.dumps(pipeline.cmd_report(args.out, log), indent=2, sort_keys=True))
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (pipeline.ConfigError, pipeline.MissingArtifactError, FileNotFoundError, FileExistsError,
            DataError, ModelError, CoverageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
