"""CLI: samexport <image> --out <dir> [--model <variant>] [...]."""

from __future__ import annotations

import argparse
import sys

from .export import ExportError, ExportJob, export_masks


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="samexport",
        description="Segment an image and export masks in the manifest "
                    "format consumed by the stitcher.")
    p.add_argument("image", help="input image")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--model", default="vit_h",
                   help="model backbone variant (vit_b / vit_l / vit_h)")
    p.add_argument("--backend", choices=("sam", "builtin"), default="sam",
                   help="builtin: offline quantization fallback, no weights")
    p.add_argument("--checkpoint", default=None,
                   help="path to the model weights (sam backend)")
    p.add_argument("--min-area-fraction", type=float, default=0.001,
                   help="drop masks smaller than this fraction of the image")
    p.add_argument("--points-per-side", type=int, default=32)
    p.add_argument("--pred-iou-thresh", type=float, default=0.88)
    p.add_argument("--stability-score-thresh", type=float, default=0.95)
    p.add_argument("--quantize-levels", type=int, default=6,
                   help="gray levels for the builtin backend")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = ExportJob(
        image=args.image, out_dir=args.out, model=args.model,
        backend=args.backend, checkpoint=args.checkpoint,
        min_area_fraction=args.min_area_fraction,
        points_per_side=args.points_per_side,
        pred_iou_thresh=args.pred_iou_thresh,
        stability_score_thresh=args.stability_score_thresh,
        quantize_levels=args.quantize_levels)
    try:
        manifest = export_masks(job)
    except ExportError as exc:
        print(f"samexport: {exc}", file=sys.stderr)
        return 1
    print(manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
