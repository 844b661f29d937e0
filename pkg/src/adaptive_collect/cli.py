"""Command-line entry point: ``adaptive-collect {run,compare,plot,synth}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as config_mod
from . import experiment, synth
from .data import write_csv
from .errors import (
    AssemblyError,
    CollectError,
    ConfigError,
    DegenerateScaleError,
    DimensionError,
    NumericalError,
    ParseError,
    StructuralError,
    UsageError,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL, EXIT_OTHER = 0, 2, 3, 4, 1


def _category(exc: CollectError) -> tuple[str, int]:
    if isinstance(exc, (ConfigError, UsageError)):
        return "usage error", EXIT_USAGE
    if isinstance(exc, (ParseError, StructuralError, DimensionError, DegenerateScaleError, AssemblyError)):
        return "data error", EXIT_DATA
    if isinstance(exc, NumericalError):
        return "numerical error", EXIT_NUMERICAL
    return "error", EXIT_OTHER


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for p in pairs:
        if "=" not in p:
            raise ConfigError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v
    return out


def cmd_run(args) -> int:
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out"] = args.out
    if args.data is not None:
        overrides["data"] = args.data
    cfg = config_mod.load(args.config, overrides, args.preset)
    res = experiment.run(cfg)
    r = res.report
    print(f"{cfg.label}: rmse={r.rmse:.6g} mae={r.mae:.6g} mape={r.mape_pct:.4g}% coverage={r.coverage:.6g}")
    print(f"artifacts in {res.out_dir}")
    return EXIT_OK


def cmd_compare(args) -> int:
    print(experiment.compare(args.runs).render(), end="")
    return EXIT_OK


def cmd_plot(args) -> int:
    print(experiment.plot_episode(args.run, args.episode, args.out))
    return EXIT_OK


def cmd_synth(args) -> int:
    ds = synth.generate(args.locations, args.hours, args.seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_csv(ds, args.out)
    print(f"wrote {args.locations} locations x {args.hours} hours to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adaptive-collect", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate one configuration")
    r.add_argument("--config", required=True, help="key = value configuration file")
    r.add_argument("--preset", choices=sorted(config_mod.PRESETS))
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="output directory")
    r.add_argument("--data", help="override the data path")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="tabulate metrics of finished runs; the first is the reference")
    c.add_argument("runs", nargs="+")
    c.set_defaults(func=cmd_compare)

    pl = sub.add_parser("plot", help="write overlay data for one test episode")
    pl.add_argument("--run", required=True)
    pl.add_argument("--episode", type=int, required=True)
    pl.add_argument("--out")
    pl.set_defaults(func=cmd_plot)

    s = sub.add_parser("synth", help="generate a synthetic occupancy CSV")
    s.add_argument("--out", required=True)
    s.add_argument("--locations", type=int, default=100)
    s.add_argument("--hours", type=int, default=synth.DEFAULT_HOURS)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CollectError as exc:
        label, code = _category(exc)
        print(f"{label}: {exc}", file=sys.stderr)
        return code
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
