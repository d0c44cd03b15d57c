"""Canvas layout, mesh-guided warping and feather blending."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .imgcore import Raster
from .meshwarp import GridMesh

logger = logging.getLogger(__name__)


class ComposeError(Exception):
    pass


@dataclass
class Canvas:
    """Output raster frame in reference-image coordinates.

    canvas coords = reference coords + offset.
    """

    offset: tuple  # (ox, oy)
    width: int
    height: int


@dataclass
class Layer:
    warped: np.ndarray  # (height, width, channels)
    alpha: np.ndarray   # (height, width), 0 where undefined


def compute_canvas(meshes) -> Canvas:
    """Tight integer bounding box of all deformed vertices, padded by 1 px."""
    verts = np.vstack([m.free.reshape(-1, 2) for m in meshes])
    if not np.all(np.isfinite(verts)):
        raise ComposeError("non-finite mesh vertex")
    x0 = math.floor(verts[:, 0].min() - 1.0)
    y0 = math.floor(verts[:, 1].min() - 1.0)
    x1 = math.ceil(verts[:, 0].max() + 1.0)
    y1 = math.ceil(verts[:, 1].max() + 1.0)
    return Canvas(offset=(-x0, -y0), width=x1 - x0 + 1, height=y1 - y0 + 1)


def _feather_alpha(src_pts: np.ndarray, width: int, height: int,
                   feather_px: float) -> np.ndarray:
    d = np.minimum.reduce([src_pts[:, 0], src_pts[:, 1],
                           width - 1 - src_pts[:, 0], height - 1 - src_pts[:, 1]])
    # keep a small floor so single-coverage border pixels still render
    return np.clip(d / max(feather_px, 1e-9), 1e-3, 1.0)


def warp_image(img: Raster, mesh: GridMesh, canvas: Canvas,
               feather_cells: float = 2.0) -> Layer:
    """Render the image through its deformed mesh onto the canvas.

    Each cell is split along the TL-BR diagonal into two triangles; the warp
    is inverse-affine per deformed triangle with bilinear source sampling.
    Alpha is the feathering weight: distance to the source border, saturating
    at feather_cells mesh cells.
    """
    out = np.zeros((canvas.height, canvas.width, img.channels))
    alpha = np.zeros((canvas.height, canvas.width))
    feather_px = feather_cells * 0.5 * (mesh.cell_w + mesh.cell_h)
    ox, oy = canvas.offset

    rest = mesh.rest
    free = mesh.free
    n_degenerate = 0
    n_total = 0
    n_flipped = 0
    for row in range(mesh.rows):
        for col in range(mesh.cols):
            quad_rest = np.array([rest[row, col], rest[row, col + 1],
                                  rest[row + 1, col], rest[row + 1, col + 1]])
            quad_free = np.array([free[row, col], free[row, col + 1],
                                  free[row + 1, col], free[row + 1, col + 1]])
            for tri in ((0, 1, 3), (0, 3, 2)):  # fixed diagonal TL-BR
                n_total += 1
                d = quad_free[list(tri)] + np.array([ox, oy])
                r = quad_rest[list(tri)]
                e1, e2 = d[1] - d[0], d[2] - d[0]
                area = e1[0] * e2[1] - e1[1] * e2[0]
                if abs(area) < 1e-12:
                    n_degenerate += 1
                    continue
                if area < 0:
                    n_flipped += 1
                # affine deformed -> rest
                md = np.column_stack([d[1] - d[0], d[2] - d[0]])
                mr = np.column_stack([r[1] - r[0], r[2] - r[0]])
                aff = mr @ np.linalg.inv(md)

                bx0 = max(int(math.floor(d[:, 0].min())), 0)
                bx1 = min(int(math.ceil(d[:, 0].max())), canvas.width - 1)
                by0 = max(int(math.floor(d[:, 1].min())), 0)
                by1 = min(int(math.ceil(d[:, 1].max())), canvas.height - 1)
                if bx1 < bx0 or by1 < by0:
                    continue
                xs, ys = np.meshgrid(np.arange(bx0, bx1 + 1), np.arange(by0, by1 + 1))
                pts = np.column_stack([xs.ravel(), ys.ravel()]).astype(np.float64)
                rel = pts - d[0]
                local = rel @ np.linalg.inv(md).T  # barycentric u, v
                u, v = local[:, 0], local[:, 1]
                inside = (u >= -1e-9) & (v >= -1e-9) & (u + v <= 1 + 1e-9)
                if not inside.any():
                    continue
                src = rel[inside] @ aff.T + r[0]
                src[:, 0] = np.clip(src[:, 0], 0.0, img.width - 1.0)
                src[:, 1] = np.clip(src[:, 1], 0.0, img.height - 1.0)
                # inline bilinear sample (vectorized)
                x0 = np.minimum(np.floor(src[:, 0]).astype(int), img.width - 2) \
                    if img.width > 1 else np.zeros(len(src), int)
                y0 = np.minimum(np.floor(src[:, 1]).astype(int), img.height - 2) \
                    if img.height > 1 else np.zeros(len(src), int)
                x0 = np.maximum(x0, 0)
                y0 = np.maximum(y0, 0)
                x1 = np.minimum(x0 + 1, img.width - 1)
                y1 = np.minimum(y0 + 1, img.height - 1)
                fx = (src[:, 0] - x0)[:, None]
                fy = (src[:, 1] - y0)[:, None]
                vals = (img.data[y0, x0] * (1 - fx) * (1 - fy)
                        + img.data[y0, x1] * fx * (1 - fy)
                        + img.data[y1, x0] * (1 - fx) * fy
                        + img.data[y1, x1] * fx * fy)
                py = pts[inside, 1].astype(int)
                px = pts[inside, 0].astype(int)
                out[py, px] = vals
                alpha[py, px] = _feather_alpha(src, img.width, img.height, feather_px)
    if n_degenerate == n_total:
        raise ComposeError("all mesh triangles degenerate")
    if n_flipped:
        logger.warning("mesh %d: %d flipped triangle(s) rendered as-is",
                       mesh.image_id, n_flipped)
    return Layer(warped=out, alpha=alpha)


def blend(layers, black_background: bool = True) -> Raster:
    """Per-pixel alpha-weighted average of the layers."""
    if not layers:
        raise ComposeError("no layers to blend")
    shape = layers[0].warped.shape
    for layer in layers:
        if layer.warped.shape != shape or layer.alpha.shape != shape[:2]:
            raise ComposeError("layer canvas mismatch")
    num = np.zeros(shape)
    den = np.zeros(shape[:2])
    for layer in layers:
        num += layer.warped * layer.alpha[:, :, None]
        den += layer.alpha
    covered = den > 0
    result = np.zeros(shape)
    result[covered] = num[covered] / den[covered, None]
    if not black_background:
        result[~covered] = 0.0  # transparent rendering handled by caller
    return Raster.from_array(np.clip(result, 0.0, 1.0))
