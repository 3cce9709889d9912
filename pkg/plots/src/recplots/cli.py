"""Entry point: plots <kind> --in <csv> --out <png>."""

import argparse
import json
import sys

from . import figures

KINDS = {
    "scaling_law": lambda args: figures.plot_scaling_law(args.inp, args.out),
    "gini_curves": lambda args: figures.plot_gini(args.inp, args.out),
    "metric_curves": lambda args: figures.plot_metrics(args.inp, args.out, logy=args.logy),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="plots", description=__doc__)
    ap.add_argument("kind", choices=sorted(KINDS))
    ap.add_argument("--in", dest="inp", required=True, help="input CSV")
    ap.add_argument("--out", dest="out", required=True, help="output image (png/svg/pdf)")
    ap.add_argument("--logy", action="store_true", help="log y-axis (metric_curves)")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        KINDS[args.kind](args)
    except Exception as exc:
        print(json.dumps({"error": f"{type(exc).__name__}: {exc}"}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
