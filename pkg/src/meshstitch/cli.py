"""Command-line driver.

Usage:
  stitch <ref> <img...> [--mode obj-fan] [--masks m1.json ...]
         [--matches p01.txt ...] [--out pano.png] [--report report.json]
         [--debug-dir d/] ...

Exit codes: 0 success, 2 insufficient overlap, 3 bad input, 4 solver failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .compose import Canvas, ComposeError
from .features import FeatureError, InsufficientOverlapError, read_matches
from .imgcore import ImageError, load_raster, write_raster
from .masks import MaskError, load_mask_manifest
from .meshwarp import MeshError, warp_points
from .metrics import MetricError
from .pipeline import MODES, PipelineError, StitchConfig, stitch
from .solver import SolverError

EXIT_OK = 0
EXIT_INSUFFICIENT_OVERLAP = 2
EXIT_BAD_INPUT = 3
EXIT_SOLVER_FAILURE = 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="stitch",
        description="Mesh-deformation image stitcher with object-structure "
                    "preservation.")
    p.add_argument("images", nargs="*",
                   help="reference image followed by the images to stitch onto it")
    p.add_argument("--mode", choices=MODES, default="obj-fan",
                   help="gsp: no structure term; obj-chain: consecutive-sample "
                        "triangles (ablation); obj-fan: center-fan triangles")
    p.add_argument("--masks", nargs="*", default=[], metavar="MANIFEST",
                   help="mask manifest JSON per non-reference image, in order")
    p.add_argument("--matches", nargs="*", default=[], metavar="FILE",
                   help="precomputed match file per image pair, in order "
                        "(overrides the built-in detector)")
    p.add_argument("--out", default="pano.png", help="output panorama PNG")
    p.add_argument("--report", default=None, help="write metric report JSON here")
    p.add_argument("--debug-dir", default=None,
                   help="write mesh/structure overlay PNGs and system stats here")
    p.add_argument("--lambda-l", type=float, default=0.75,
                   help="local similarity weight")
    p.add_argument("--lambda-obj", type=float, default=1.5,
                   help="object structure weight")
    p.add_argument("--cell", type=float, default=40.0, help="mesh cell size (px)")
    p.add_argument("--delta", type=float, default=20.0,
                   help="boundary sample spacing (px)")
    p.add_argument("--min-area-fraction", type=float, default=0.001,
                   help="drop masks smaller than this fraction of the image")
    p.add_argument("--outer-iterations", type=int, default=2,
                   help="solve / target-refresh rounds")
    p.add_argument("--ransac-threshold", type=float, default=3.0)
    p.add_argument("--ransac-iters", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--feather", type=float, default=2.0,
                   help="feather radius in mesh cells")
    p.add_argument("--omega-overlap", action="store_true",
                   help="down-weight structure samples inside the overlap "
                        "region (factor 0.5); default keeps all weights at 1")
    p.add_argument("--include-center", action="store_true",
                   help="also anchor each fan center (full per-triangle "
                        "energy instead of the simplified boundary-only form)")
    p.add_argument("--chain", action="store_true",
                   help="sequential pair topology instead of the default star "
                        "around the reference")
    p.add_argument("--gauge", choices=("fixed", "free"), default="fixed",
                   help="fixed: reference mesh pinned at rest; free: all "
                        "meshes solved with centroid/rotation anchoring")
    p.add_argument("--print-config", action="store_true",
                   help="print the effective configuration and exit")
    return p


def config_from_args(args) -> StitchConfig:
    return StitchConfig(
        mode=args.mode,
        lambda_local=args.lambda_l,
        lambda_structure=args.lambda_obj,
        cell_size=args.cell,
        delta=args.delta,
        min_area_fraction=args.min_area_fraction,
        outer_iterations=args.outer_iterations,
        ransac_threshold=args.ransac_threshold,
        ransac_iterations=args.ransac_iters,
        seed=args.seed,
        feather_cells=args.feather,
        omega_overlap=args.omega_overlap,
        include_center=args.include_center,
        topology="chain" if args.chain else "star",
        gauge=args.gauge,
    )


def _draw_grid(draw: ImageDraw.ImageDraw, mesh, offset, color):
    ox, oy = offset
    for r in range(mesh.rows + 1):
        pts = [(x + ox, y + oy) for x, y in mesh.free[r, :, :]]
        draw.line(pts, fill=color, width=1)
    for c in range(mesh.cols + 1):
        pts = [(x + ox, y + oy) for x, y in mesh.free[:, c, :]]
        draw.line(pts, fill=color, width=1)


def render_debug(meshes: dict, structures: dict, canvas: Canvas, out_dir):
    """Overlay PNGs: deformed grid, object contours, fan spokes, samples."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ox, oy = canvas.offset
    written = []
    for idx in sorted(meshes):
        mesh = meshes[idx]
        im = Image.new("RGB", (canvas.width, canvas.height), (0, 0, 0))
        draw = ImageDraw.Draw(im)
        _draw_grid(draw, mesh, (ox, oy), (70, 70, 220))
        for st in structures.get(idx, []):
            pts = warp_points(mesh, st.all_points()) + np.array([ox, oy])
            center, samples = pts[0], pts[1:]
            closed = list(map(tuple, samples)) + [tuple(samples[0])]
            draw.line(closed, fill=(60, 200, 60), width=1)
            for s in samples:
                draw.line([tuple(center), tuple(s)], fill=(200, 160, 40), width=1)
                draw.ellipse([s[0] - 1.5, s[1] - 1.5, s[0] + 1.5, s[1] + 1.5],
                             fill=(220, 60, 60))
            draw.ellipse([center[0] - 2.5, center[1] - 2.5,
                          center[0] + 2.5, center[1] + 2.5], fill=(250, 250, 80))
        path = out_dir / f"overlay_{idx:02d}.png"
        im.save(path, format="PNG")
        written.append(path)
    return written


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config = config_from_args(args)

    if args.print_config:
        print(json.dumps(config.to_dict(), indent=2, sort_keys=True))
        return EXIT_OK

    if len(args.images) < 2:
        parser.error("need a reference image and at least one other image")

    try:
        config.validate()
        images = [load_raster(p) for p in args.images]

        mask_sets = {}
        for k, manifest in enumerate(args.masks):
            mask_sets[k + 1] = load_mask_manifest(manifest, image_id=k + 1)

        n = len(images)
        pair_order = ([(i, 0) for i in range(1, n)] if config.topology == "star"
                      else [(i, i - 1) for i in range(1, n)])
        provided = {}
        for pair, path in zip(pair_order, args.matches):
            provided[pair] = read_matches(path, pair_id=pair)
        if len(args.matches) > len(pair_order):
            raise PipelineError(
                f"{len(args.matches)} match files for {len(pair_order)} pairs")

        result = stitch(images, mask_sets=mask_sets, provided_matches=provided,
                        config=config)
    except InsufficientOverlapError as exc:
        print(f"stitch: insufficient overlap: {exc}", file=sys.stderr)
        return EXIT_INSUFFICIENT_OVERLAP
    except (ImageError, MaskError, FeatureError, MeshError, PipelineError,
            ComposeError, MetricError) as exc:
        print(f"stitch: bad input: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except SolverError as exc:
        print(f"stitch: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER_FAILURE

    write_raster(result.panorama, args.out)

    if args.report:
        doc = result.report.to_dict()
        doc["config"] = config.to_dict()
        doc["system"] = result.system_stats
        Path(args.report).write_text(json.dumps(doc, indent=2, sort_keys=True))

    if args.debug_dir:
        render_debug(result.meshes, result.structures, result.canvas,
                     args.debug_dir)
        stats_path = Path(args.debug_dir) / "system_stats.json"
        stats_path.write_text(json.dumps(result.system_stats, indent=2,
                                         sort_keys=True))

    print(result.report.to_table())
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
