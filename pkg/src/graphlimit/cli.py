"""Command line: ``graphlimit run <config> [--out DIR] [--workers N]`` and
``graphlimit plot <csv> --spec <file>``."""

import argparse
import sys
from pathlib import Path

import yaml

from .harness import EXIT_CONFIG, EXIT_RUNTIME, plot, run


def _plot(args):
    try:
        spec = yaml.safe_load(Path(args.spec).read_text())
        if not isinstance(spec, dict) or "x" not in spec or "y" not in spec:
            raise ValueError("plot spec needs 'x' and 'y' column names")
        if args.out:
            spec["out"] = args.out
        out, slope = plot(args.csv, spec)
    except (OSError, ValueError, KeyError, yaml.YAMLError) as exc:
        sys.stderr.write(f'{{"status": "error", "kind": "plot", "message": {str(exc)!r}}}\n')
        return EXIT_CONFIG if isinstance(exc, (KeyError, ValueError, yaml.YAMLError)) else EXIT_RUNTIME
    print(f"wrote {out}" + (f" (fitted slope {slope:.4f})" if slope is not None else ""))
    return 0


def main(argv=None):
    ap = argparse.ArgumentParser(prog="graphlimit", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (overrides output.dir)")
    r.add_argument("--workers", type=int, help="worker processes (results do not depend on it)")
    p = sub.add_parser("plot", help="SVG plot of two CSV columns")
    p.add_argument("csv")
    p.add_argument("--spec", required=True, help="YAML/JSON file with x, y, logx, logy, fit, title, out")
    p.add_argument("--out")
    args = ap.parse_args(argv)
    if args.cmd == "run":
        return run(args.config, args.out, args.workers)
    return _plot(args)


if __name__ == "__main__":
    sys.exit(main())
