"""Command-line entry point: ``uad <command> [--config PATH] [--seed INT] [--out DIR]``.

Exit codes: 0 success, 1 runtime failure, 2 invalid input or config,
3 missing upstream artifact.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import pipeline
from .config import RunConfig, dump_config, parse_config
from .errors import DependencyError, UadError, ValidationError

logger = logging.getLogger("uad")

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, EXIT_DEPENDENCY = 0, 1, 2, 3

COMMANDS = {
    "preprocess": pipeline.stage_preprocess,
    "phantom": pipeline.stage_phantom,
    "synth-train": pipeline.stage_synth_train,
    "synth-sample": pipeline.stage_synth_sample,
    "synth-filter": pipeline.stage_synth_filter,
    "train": pipeline.stage_train,
    "infer": pipeline.stage_infer,
    "evaluate": pipeline.stage_evaluate,
    "bench": pipeline.stage_bench,
}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults apply when omitted)")
    common.add_argument("--seed", type=int, help="root seed, overrides the config")
    common.add_argument("--out", help="output directory, overrides paths.out")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="uad", description="Unsupervised anomaly detection on uterine MRI.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    run = sub.add_parser("run", parents=[common], help="run several stages in pipeline order")
    run.add_argument("--stages", default=",".join(pipeline.STAGES),
                     help=f"comma-separated subset of {','.join(pipeline.STAGES)}")
    sub.add_parser("show-config", parents=[common], help="print the resolved configuration")
    return p


def load_run_config(path: str | None, seed: int | None = None, out: str | None = None) -> RunConfig:
    cfg = parse_config(path) if path else RunConfig()
    if seed is not None:
        cfg = dataclasses.replace(cfg, seed=seed)
    if out is not None:
        cfg = dataclasses.replace(cfg, paths=dataclasses.replace(cfg.paths, out=out))
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, args.seed, args.out)
        if args.command == "show-config":
            sys.stdout.write(dump_config(cfg))
        elif args.command == "run":
            stages = [s.strip() for s in args.stages.split(",") if s.strip()]
            for stage, path in pipeline.run_pipeline(cfg, stages).items():
                print(f"{stage}\t{path}")
        else:
            print(COMMANDS[args.command](cfg))
    except DependencyError as exc:
        print(f"uad: missing dependency: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (ValidationError, FileNotFoundError) as exc:
        print(f"uad: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (UadError, RuntimeError, OSError) as exc:
        print(f"uad: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
