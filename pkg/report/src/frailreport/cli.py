"""`frailforest-report --kind aes --in curves.csv --out fig.png`"""

from __future__ import annotations

import argparse
import sys

from .render import KINDS, PlotSpec, SchemaError, render


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="frailforest-report",
        description="Render a figure from a frailforest CSV output.",
    )
    parser.add_argument("--kind", required=True, choices=KINDS)
    parser.add_argument("--in", dest="input_path", required=True, metavar="CSV")
    parser.add_argument("--out", dest="output_path", required=True, metavar="IMAGE")
    parser.add_argument("--title", default=None)
    args = parser.parse_args(argv)

    try:
        out = render(PlotSpec(
            kind=args.kind,
            input_path=args.input_path,
            output_path=args.output_path,
            title=args.title,
        ))
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
