"""Standalone renderer: a run directory plus a figure kind in, PNGs out."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import PlotError
from .render import KINDS, PlotJob, render


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="qmetasur-plots",
        description="Render figures from the text artifacts of completed runs.",
    )
    parser.add_argument("run_dirs", nargs="+", help="run directories to read")
    parser.add_argument("--kind", required=True, choices=KINDS,
                        help="which figure to render")
    parser.add_argument("--out", default=None,
                        help="output directory (default: <first run dir>/figures)")
    args = parser.parse_args(argv)
    out_dir = Path(args.out) if args.out else Path(args.run_dirs[0]) / "figures"
    try:
        job = PlotJob(tuple(Path(d) for d in args.run_dirs), args.kind, out_dir)
        written = render(job)
    except (PlotError, OSError) as e:
        print(json.dumps({"error": type(e).__name__, "detail": str(e)}),
              file=sys.stderr)
        return 1
    for path in written:
        print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
