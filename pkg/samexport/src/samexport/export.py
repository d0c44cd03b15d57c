"""Segment an image and write one PNG per mask plus a JSON manifest.

The manifest layout is the one the stitcher's mask loader consumes:

  { "image": "<file>", "masks": [ { "file": "<png>", "area": <int> } ] }

Masks are sorted by descending pixel area and written as 8-bit PNGs where a
pixel belongs to the mask iff its value is >= 128. Output bytes are
deterministic for fixed inputs and parameters.

Two segmentation backends:
  sam      — Segment Anything automatic mask generation (optional heavy
             dependency, loaded lazily; needs local model weights)
  builtin  — dependency-free fallback: gray-level quantization followed by
             connected components. Coarse, but deterministic and offline;
             useful for smoke tests and simple scenes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

logger = logging.getLogger(__name__)


class ExportError(Exception):
    pass


@dataclass
class ExportJob:
    image: str
    out_dir: str
    model: str = "vit_h"
    backend: str = "sam"
    min_area_fraction: float = 0.001
    checkpoint: str = None
    # automatic-generation knobs, passed through to the SAM generator
    points_per_side: int = 32
    pred_iou_thresh: float = 0.88
    stability_score_thresh: float = 0.95
    # builtin backend: number of gray levels to quantize into
    quantize_levels: int = 6

    def validate(self):
        if self.backend not in ("sam", "builtin"):
            raise ExportError(f"unknown backend {self.backend!r}")
        if not 0.0 <= self.min_area_fraction <= 1.0:
            raise ExportError("min_area_fraction must be in [0, 1]")
        if self.quantize_levels < 2:
            raise ExportError("quantize_levels must be >= 2")


def _load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except FileNotFoundError as exc:
        raise ExportError(f"image not found: {path}") from exc
    except Exception as exc:
        raise ExportError(f"cannot read image {path}: {exc}") from exc


def segment_builtin(rgb: np.ndarray, levels: int = 6) -> list:
    """Quantize the gray image and split each level into connected components."""
    gray = rgb.astype(np.float64).mean(axis=-1)
    lo, hi = gray.min(), gray.max()
    if hi - lo < 1e-9:
        return [np.ones(gray.shape, dtype=bool)]
    q = np.minimum((levels * (gray - lo) / (hi - lo)).astype(int), levels - 1)
    out = []
    for level in range(levels):
        labeled, n = ndimage.label(q == level)
        for comp in range(1, n + 1):
            mask = labeled == comp
            if mask.sum() >= 16:  # skip speckle outright
                out.append(mask)
    return out


def segment_sam(rgb: np.ndarray, job: ExportJob) -> list:
    try:
        from segment_anything import (SamAutomaticMaskGenerator,
                                      sam_model_registry)
    except ImportError as exc:
        raise ExportError(
            "segment-anything is not installed; install the 'sam' extra or "
            "use --backend builtin") from exc
    if not job.checkpoint:
        raise ExportError("sam backend needs --checkpoint pointing at the "
                          "model weights")
    try:
        sam = sam_model_registry[job.model](checkpoint=job.checkpoint)
    except KeyError as exc:
        raise ExportError(f"unknown model variant {job.model!r}") from exc
    except Exception as exc:
        raise ExportError(f"model load failed: {exc}") from exc
    generator = SamAutomaticMaskGenerator(
        sam, points_per_side=job.points_per_side,
        pred_iou_thresh=job.pred_iou_thresh,
        stability_score_thresh=job.stability_score_thresh)
    return [np.asarray(r["segmentation"], dtype=bool)
            for r in generator.generate(rgb)]


def export_masks(job: ExportJob) -> Path:
    """Run segmentation and write mask PNGs + manifest; returns manifest path."""
    job.validate()
    rgb = _load_image(job.image)
    out_dir = Path(job.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if job.backend == "builtin":
        raw = segment_builtin(rgb, job.quantize_levels)
    else:
        raw = segment_sam(rgb, job)

    total = rgb.shape[0] * rgb.shape[1]
    threshold = job.min_area_fraction * total
    kept = [(int(m.sum()), m) for m in raw if m.sum() >= threshold]
    # descending area; ties broken by first-set pixel for a stable order
    kept.sort(key=lambda am: (-am[0], np.flatnonzero(am[1].ravel())[0]))
    if not kept:
        logger.warning("no masks survived filtering for %s", job.image)

    entries = []
    for i, (area, mask) in enumerate(kept):
        name = f"mask_{i:03d}.png"
        Image.fromarray(np.where(mask, 255, 0).astype(np.uint8),
                        mode="L").save(out_dir / name, format="PNG")
        entries.append({"file": name, "area": area})

    manifest = {"image": Path(job.image).name, "masks": entries}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
