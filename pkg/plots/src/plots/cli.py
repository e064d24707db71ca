"""Command-line entry: ``plots <kind> --in <run dir> --out <image>``.

Exit codes: 0 on success, 2 when the inputs are missing or violate the
documented artifact schemas.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from .figures import KINDS, FigureError, PlotSpec, render


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="plots",
        description="Render figures from solver run artifacts.")
    parser.add_argument("kind", choices=KINDS,
                        help="which figure to draw")
    parser.add_argument("--in", dest="input_dir", required=True,
                        type=Path, help="run output directory")
    parser.add_argument("--out", dest="output", required=True,
                        type=Path, help="image file to write")
    axis = parser.add_mutually_exclusive_group()
    axis.add_argument("--log-y", dest="log_y", action="store_true",
                      default=None, help="force a logarithmic value axis")
    axis.add_argument("--no-log-y", dest="log_y", action="store_false",
                      help="force a linear value axis")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if not args.input_dir.is_dir():
        print(f"error: {args.input_dir} is not a directory", file=sys.stderr)
        return 2
    spec = PlotSpec(kind=args.kind, input_dir=args.input_dir,
                    output=args.output, log_y=args.log_y)
    try:
        written = render(spec)
    except FigureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(written)
    return 0


if __name__ == "__main__":
    sys.exit(main())
