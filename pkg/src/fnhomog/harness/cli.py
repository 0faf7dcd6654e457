"""Command-line entry point: ``fnhomog <subcommand> [--config PATH] ...``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, parse_config
from .run import run, run_moments

SUBCOMMANDS = {
    "solve": "solve",
    "obstacle": "obstacle",
    "fbar": "fbar",
    "regularity": "regularity",
    "corrector": "corrector",
    "converge": "convergence",
    "counterexample": "counterexample",
    "moments": None,
}


def build_parser():
    p = argparse.ArgumentParser(prog="fnhomog", description="Degenerate fully nonlinear "
                                "homogenization experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="flat section.key = value file")
        s.add_argument("--seed", type=int, help="run with this single seed")
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("--out", type=Path, help="output directory")
        s.add_argument("--no-cache", action="store_true", help="recompute every solve")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration key")
    return p


def load(args):
    text = args.config.read_text() if args.config else ""
    kind = SUBCOMMANDS[args.command]
    overrides = {}
    for item in args.set:
        k, _, v = item.partition("=")
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["schedule.seeds"] = str(args.seed)
    text_kind = None
    for line in text.splitlines():
        k, eq, v = line.split("#", 1)[0].partition("=")
        if eq and k.strip() == "experiment.kind":
            text_kind = v.strip()
    if kind is not None and text_kind not in (None, kind):
        raise ConfigError([f"config kind {text_kind!r} does not match '{args.command}'"])
    if text_kind is None:
        overrides.setdefault("experiment.kind", kind or "solve")
    return parse_config(text, overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load(args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return 2
    out = args.out if args.out is not None else Path(cfg["output.dir"])
    if SUBCOMMANDS[args.command] is None:
        rows = run_moments(cfg, out)
        for r in rows:
            print(f"p={r['p']:g} {r['method']}: {r['value']:.6g} +- {r['stderr']:.2g}")
        return 0
    rec = run(cfg, out=out, workers=args.workers, use_cache=not args.no_cache)
    for name, path in rec.outputs.items():
        print(f"wrote {name}: {path}")
    for w in rec.warnings:
        print(f"warning: {w}")
    if rec.error:
        print(f"error: {rec.error}", file=sys.stderr)
    for k, v in rec.verdicts.items():
        print(f"{k}: {'pass' if v else 'FAIL'}")
    return 0 if rec.ok else 1


if __name__ == "__main__":
    sys.exit(main())
