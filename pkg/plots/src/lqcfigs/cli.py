"""Command line: render one benchmark figure from a CSV artifact directory."""
import argparse
import sys

from .figures import FIGURES, FigureDataError, render, spec_for

FIGURE_BY_NUMBER = {str(i + 1): name for i, name in enumerate(FIGURES)}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="render_figs", description=__doc__)
    parser.add_argument("--in", dest="indir", required=True, help="benchmark CSV directory")
    parser.add_argument("--fig", required=True, choices=sorted(FIGURE_BY_NUMBER), help="figure number")
    parser.add_argument("--out", required=True, help="output SVG path")
    parser.add_argument("--confidence", type=float, default=0.95,
                        help="confidence level for covariance ellipses")
    args = parser.parse_args(argv)
    try:
        spec = spec_for(FIGURE_BY_NUMBER[args.fig], args.indir, args.out, args.confidence)
        render(spec)
    except FigureDataError as exc:
        print(f"figure error: {exc}", file=sys.stderr)
        return 1
    print(args.out, file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
