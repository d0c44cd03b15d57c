"""Distortion and alignment metrics for a solved stitch.

The distortion number follows the mean-distorted-residuals idea: mesh rows
and columns start out straight, so their deviation from the best-fit line
after warping measures bending. Residuals are normalized by the line's own
deformation scale and the cell size, making the value dimensionless and
invariant under a global similarity. Absolute values are therefore only
comparable between runs of this implementation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .meshwarp import GridMesh, warp_points


class MetricError(Exception):
    pass


@dataclass
class MetricReport:
    mdr: float
    overlap_rmse: float
    per_image: dict = field(default_factory=dict)
    term_energies: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mdr": self.mdr,
            "overlap_rmse": self.overlap_rmse,
            "per_image": self.per_image,
            "term_energies": self.term_energies,
            "notes": self.notes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        lines = [f"{'metric':<24}{'value':>14}"]
        lines.append(f"{'mdr':<24}{self.mdr:>14.6f}")
        lines.append(f"{'overlap_rmse (px)':<24}{self.overlap_rmse:>14.6f}")
        for tag, e in sorted(self.term_energies.items()):
            lines.append(f"{'energy/' + tag:<24}{e:>14.6g}")
        for img, v in sorted(self.per_image.items()):
            lines.append(f"{'mdr/image ' + str(img):<24}{v:>14.6f}")
        return "\n".join(lines)


def _line_residual(deformed: np.ndarray, rest: np.ndarray, cell: float):
    """Normalized RMS perpendicular distance to the TLS line, or None."""
    if len(deformed) < 3:
        return None
    centered = deformed - deformed.mean(axis=0)
    svals = np.linalg.svd(centered, compute_uv=False)
    rms = svals[-1] / np.sqrt(len(deformed))
    len_def = np.linalg.norm(np.diff(deformed, axis=0), axis=1).sum()
    len_rest = np.linalg.norm(np.diff(rest, axis=0), axis=1).sum()
    if len_rest < 1e-12 or len_def < 1e-12:
        return None
    scale = len_def / len_rest
    return float(rms / (scale * cell))


def compute_mdr(meshes, per_image: dict = None) -> float:
    """Mean over all mesh rows and columns of all images of the normalized
    straightness residual. 0 for identity or any global similarity."""
    values = []
    for mesh in meshes:
        cell = 0.5 * (mesh.cell_w + mesh.cell_h)
        img_vals = []
        for r in range(mesh.rows + 1):
            v = _line_residual(mesh.free[r, :, :], mesh.rest[r, :, :], cell)
            if v is not None:
                img_vals.append(v)
        for c in range(mesh.cols + 1):
            v = _line_residual(mesh.free[:, c, :], mesh.rest[:, c, :], cell)
            if v is not None:
                img_vals.append(v)
        if per_image is not None and img_vals:
            per_image[mesh.image_id] = float(np.mean(img_vals))
        values.extend(img_vals)
    if not values:
        raise MetricError("no mesh line has enough vertices")
    return float(np.mean(values))


def compute_overlap_rmse(pair_matches, meshes: dict) -> float:
    """RMS canvas-space distance between the warped endpoints of all inlier
    matches. pair_matches: list of (image_i, image_j, MatchSet)."""
    sq_sum = 0.0
    count = 0
    for i, j, m in pair_matches:
        if len(m) == 0:
            continue
        wp = warp_points(meshes[i], m.p)
        wq = warp_points(meshes[j], m.q)
        d = np.linalg.norm(wp - wq, axis=1)
        sq_sum += float((d ** 2).sum())
        count += len(d)
    if count == 0:
        raise MetricError("no matches to evaluate")
    return float(np.sqrt(sq_sum / count))
