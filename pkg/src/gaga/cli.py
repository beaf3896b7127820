"""Command-line entry point.

    gaga <stage> --config FILE [--seed N] [--alpha F] [--kp N] [--hops N]
         [--budget F] [--out DIR] [--sweep KEY=LIST] [--set KEY=VALUE ...]

Stages: synth, select, annotate, build-anno-graph, align, finetune,
evaluate, pipeline. Exit codes: 0 success, 1 internal error, 2 missing
prerequisite, 3 validation failure, 4 provider failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import RunConfig, describe_keys
from .errors import (
    ContractError,
    DegenerateInputError,
    GagaError,
    MissingArtifactError,
    ProviderError,
    ShapeError,
    ValidationError,
)
from .pipeline import STAGES, run_stage, run_sweep

EXIT_INTERNAL = 1
EXIT_MISSING = 2
EXIT_VALIDATION = 3
EXIT_PROVIDER = 4


class _Parser(argparse.ArgumentParser):
    """Usage errors are validation failures, not missing prerequisites."""

    def error(self, message):  # noqa: D102
        self.print_usage(sys.stderr)
        print(f"gaga: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def _build_parser() -> _Parser:
    epilog_lines = ["configuration keys (also usable with --set and --sweep):", ""]
    epilog_lines += [f"  {line}" for line in describe_keys()]
    parser = _Parser(
        prog="gaga",
        description=__doc__.splitlines()[0],
        epilog="\n".join(epilog_lines),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("stage", choices=STAGES, help="pipeline stage to run")
    parser.add_argument("--config", type=Path, default=None,
                        help="config file (key = value lines); defaults apply if omitted")
    parser.add_argument("--out", type=Path, default=Path("runs/default"),
                        help="output directory owned by this run (artifact default)")
    parser.add_argument("--seed", type=int, default=None,
                        help="run-level seed override (artifact default 7)")
    parser.add_argument("--alpha", type=float, default=None,
                        help="prototype/pair loss trade-off (method default 0.6)")
    parser.add_argument("--kp", type=int, default=None,
                        help="prototype count (method default 40)")
    parser.add_argument("--hops", type=int, default=None,
                        help="subgraph radius (method default 2)")
    parser.add_argument("--budget", type=float, default=None,
                        help="node annotation budget fraction (method default 0.01)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration key")
    parser.add_argument("--sweep", default=None, metavar="KEY=V1,V2,...",
                        help="with 'evaluate': run one sub-pipeline per value and "
                             "summarize metrics into sweep.csv")
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for flag, key in (("seed", "seed"), ("alpha", "align.alpha"),
                      ("kp", "align.prototypes"), ("hops", "align.hops"),
                      ("budget", "select.node_fraction")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    for item in args.set:
        if "=" not in item:
            raise ValidationError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return cfg.copy_with(overrides) if overrides else cfg


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
        if args.sweep:
            if args.stage != "evaluate":
                raise ValidationError("--sweep is only supported with the evaluate stage")
            if "=" not in args.sweep:
                raise ValidationError("--sweep expects KEY=V1,V2,...")
            key, raw = args.sweep.split("=", 1)
            values = [v.strip() for v in raw.split(",") if v.strip()]
            if not values:
                raise ValidationError("--sweep needs at least one value")
            path = run_sweep(cfg, args.out, key.strip(), values)
            print(f"sweep report written to {path}")
        else:
            run_stage(args.stage, cfg, args.out)
            print(f"stage '{args.stage}' completed; artifacts in {args.out}")
        return 0
    except MissingArtifactError as exc:
        print(f"gaga: missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ProviderError as exc:
        print(f"gaga: provider failure: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (ValidationError, ContractError, ShapeError, DegenerateInputError) as exc:
        print(f"gaga: validation failure: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except GagaError as exc:
        print(f"gaga: error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
