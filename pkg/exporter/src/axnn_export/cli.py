"""Command line for the exporter: model in, manifest + parity report out."""
from __future__ import annotations

import argparse
import sys

import numpy as np

from .export import ExportError, UnsupportedOpsError, export


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="axnn-export",
        description="Convert a Keras CNN into the axnn quantized manifest.")
    parser.add_argument("--model", required=True,
                        help="saved Keras model (.keras or SavedModel dir)")
    parser.add_argument("--probe", required=True,
                        help=".npz with an 'images' array for calibration")
    parser.add_argument("--out", required=True, help="manifest output path")
    parser.add_argument("--report", required=True,
                        help="plain-text parity report output path")
    parser.add_argument("--limit", type=int, default=None,
                        help="use only the first N probe images")
    parser.add_argument("--granularity", default="per-tensor",
                        choices=["per-tensor", "per-channel"])
    args = parser.parse_args(argv)

    try:
        with np.load(args.probe) as z:
            images = z["images"]
    except (OSError, KeyError, ValueError) as e:
        print(f"axnn-export: cannot read probe {args.probe}: {e}",
              file=sys.stderr)
        return 3
    if args.limit is not None:
        images = images[:args.limit]
    if np.issubdtype(images.dtype, np.integer):
        images = images.astype(np.float64) / 255.0
    if len(images) < 100:
        print(f"axnn-export: warning: only {len(images)} probe images; "
              "the parity report is meant for >= 100", file=sys.stderr)

    try:
        _, report = export(args.model, images, out_manifest=args.out,
                           report_path=args.report,
                           granularity=args.granularity)
    except UnsupportedOpsError as e:
        print(f"axnn-export: {e}", file=sys.stderr)
        return 3
    except ExportError as e:
        print(f"axnn-export: {e}", file=sys.stderr)
        return 2
    print(report.to_text(), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
