"""Segmentation-mask ingestion, contour tracing and triangle-fan
object structures with similarity-invariant local coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imgcore import ImageError, load_raster

# 90-degree rotation used by the local frame: second axis = R90 @ (Vi - V0)
R90 = np.array([[0.0, 1.0], [-1.0, 0.0]])


class MaskError(Exception):
    pass


@dataclass
class MaskSet:
    image_id: int
    masks: list  # list of bool arrays, shape (height, width)
    areas: list  # set-pixel counts, parallel to masks

    def __len__(self):
        return len(self.masks)


@dataclass
class Contour:
    """Closed boundary polyline, counterclockwise (positive shoelace area).

    First point is not repeated at the end; closure is implicit.
    """

    points: np.ndarray  # (N, 2) float, columns x, y

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(self.points) < 3:
            raise MaskError(f"contour too small: {len(self.points)} points")

    def perimeter(self) -> float:
        d = np.diff(np.vstack([self.points, self.points[:1]]), axis=0)
        return float(np.linalg.norm(d, axis=1).sum())

    def signed_area(self) -> float:
        p = self.points
        q = np.roll(p, -1, axis=0)
        return 0.5 * float((p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]).sum())


@dataclass
class ObjectStructure:
    """Triangle fan of one segmented object.

    center is the fan apex, samples the arc-length-resampled boundary points.
    local_coords[i] holds the (x, y) coordinates of samples[i+1] in the frame
    (center, center->samples[i], R90 applied to that edge), cyclically.
    """

    center: np.ndarray          # (2,)
    samples: np.ndarray         # (Ns, 2)
    local_coords: np.ndarray    # (Ns, 2), row i pairs samples[i] -> samples[(i+1) % Ns]
    sample_weights: np.ndarray  # (Ns,), all >= 0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(2)
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1, 2)
        self.local_coords = np.asarray(self.local_coords, dtype=np.float64).reshape(-1, 2)
        self.sample_weights = np.asarray(self.sample_weights, dtype=np.float64).reshape(-1)
        if len(self.local_coords) != len(self.samples):
            raise MaskError("local_coords/samples length mismatch")
        if len(self.sample_weights) != len(self.samples):
            raise MaskError("sample_weights/samples length mismatch")
        if np.any(self.sample_weights < 0):
            raise MaskError("negative sample weight")

    def all_points(self) -> np.ndarray:
        """Center followed by the boundary samples."""
        return np.vstack([self.center[None, :], self.samples])


def local_coordinates(v0, vi, vnext):
    """Coordinates (x, y) with vnext = v0 + x*(vi - v0) + y*R90@(vi - v0).

    Invariant under any similarity transform applied jointly to the three
    points, which is what makes the fan energy similarity-preserving.
    """
    v0 = np.asarray(v0, dtype=np.float64)
    e = np.asarray(vi, dtype=np.float64) - v0
    if np.dot(e, e) < 1e-18:
        raise MaskError("degenerate local frame: sample coincides with center")
    basis = np.column_stack([e, R90 @ e])
    return np.linalg.solve(basis, np.asarray(vnext, dtype=np.float64) - v0)


def reconstruct_point(v0, vi, xy):
    """Inverse of local_coordinates."""
    v0 = np.asarray(v0, dtype=np.float64)
    e = np.asarray(vi, dtype=np.float64) - v0
    return v0 + xy[0] * e + xy[1] * (R90 @ e)


def load_mask_manifest(path, image_id: int = 0) -> MaskSet:
    """Load the JSON manifest written by the mask exporter.

    Schema: { "image": "<file>", "masks": [ { "file": "<png>", "area": <int> } ] }.
    Mask pixels are set iff the stored 8-bit value is >= 128. All masks must
    share dimensions; areas are recomputed from the pixels.
    """
    path = Path(path)
    if not path.is_file():
        raise MaskError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MaskError(f"malformed manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or "masks" not in doc:
        raise MaskError(f"manifest {path} missing 'masks' list")
    masks, areas = [], []
    dims = None
    for entry in doc["masks"]:
        mask_path = path.parent / entry["file"]
        try:
            raster = load_raster(mask_path)
        except ImageError as exc:
            raise MaskError(str(exc)) from exc
        m = raster.data[:, :, 0] >= (128.0 / 255.0)
        if dims is None:
            dims = m.shape
        elif m.shape != dims:
            raise MaskError(
                f"mask dimension mismatch: {entry['file']} is {m.shape[::-1]}, "
                f"expected {dims[::-1]}")
        masks.append(m)
        areas.append(int(m.sum()))
    # cross-check against the source image when it is present next to the manifest
    if dims is not None and doc.get("image"):
        img_path = path.parent / doc["image"]
        if img_path.is_file():
            img = load_raster(img_path)
            if (img.height, img.width) != dims:
                raise MaskError(
                    f"mask dimensions {dims[::-1]} differ from image "
                    f"{(img.width, img.height)}")
    return MaskSet(image_id=image_id, masks=masks, areas=areas)


def filter_small_masks(ms: MaskSet, min_area_fraction: float) -> MaskSet:
    """Drop masks whose area is below min_area_fraction of the image area."""
    if not 0.0 <= min_area_fraction < 1.0:
        raise MaskError("min_area_fraction must be in [0, 1)")
    if not ms.masks:
        return MaskSet(ms.image_id, [], [])
    h, w = ms.masks[0].shape
    threshold = min_area_fraction * w * h
    keep = [i for i, a in enumerate(ms.areas) if a >= threshold]
    return MaskSet(ms.image_id, [ms.masks[i] for i in keep], [ms.areas[i] for i in keep])


_MOORE = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]
# (dr, dc) clockwise in raster orientation, starting at "up"


def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if count == 0:
        raise MaskError("empty mask")
    if count == 1:
        return labels == 1
    sizes = ndimage.sum_labels(np.ones_like(mask, dtype=np.int64), labels,
                               index=np.arange(1, count + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def trace_contour(mask: np.ndarray) -> Contour:
    """Moore-neighbor boundary trace of the largest 8-connected component.

    Returns the outer boundary as pixel centers, oriented counterclockwise
    (positive shoelace area in x-right / y-down coordinates).
    """
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise MaskError("empty mask")
    comp = _largest_component(mask)
    padded = np.zeros((comp.shape[0] + 2, comp.shape[1] + 2), dtype=bool)
    padded[1:-1, 1:-1] = comp

    rs, cs = np.nonzero(padded)
    start = (int(rs[0]), int(cs[0]))  # topmost, then leftmost
    current = start
    back = (start[0], start[1] - 1)  # outside pixel to the left of start

    boundary = []
    first_move = None
    for _ in range(4 * padded.size):
        k0 = _MOORE.index((back[0] - current[0], back[1] - current[1]))
        found = None
        for step in range(1, 9):
            k = (k0 + step) % 8
            cand = (current[0] + _MOORE[k][0], current[1] + _MOORE[k][1])
            if padded[cand]:
                found = cand
                next_back = (current[0] + _MOORE[(k - 1) % 8][0],
                             current[1] + _MOORE[(k - 1) % 8][1])
                break
        if found is None:  # isolated pixel
            boundary = [start]
            break
        move = (current, found)
        if first_move is None:
            first_move = move
        elif move == first_move:  # re-entered start in the original direction
            break
        boundary.append(current)
        back = next_back
        current = found
    pts = np.array([[c - 1, r - 1] for r, c in boundary], dtype=np.float64)
    # remove consecutive duplicates
    if len(pts) > 1:
        keep = np.ones(len(pts), dtype=bool)
        keep[1:] = np.any(pts[1:] != pts[:-1], axis=1)
        pts = pts[keep]
    if len(pts) < 3:
        raise MaskError(f"contour too small: {len(pts)} points")
    contour = Contour(pts)
    if contour.signed_area() < 0:
        contour = Contour(pts[::-1])
    return contour


def _resample_closed(points: np.ndarray, spacing: float):
    closed = np.vstack([points, points[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    n = int(round(total / spacing))
    if n < 2:
        raise MaskError(f"contour perimeter {total:.1f} too short for spacing {spacing}")
    targets = np.arange(n) * (total / n)
    xs = np.interp(targets, cum, closed[:, 0])
    ys = np.interp(targets, cum, closed[:, 1])
    return np.column_stack([xs, ys])


def mask_centroid(mask: np.ndarray) -> np.ndarray:
    """Area centroid; falls back to the deepest interior point when the
    centroid lands outside the (possibly non-convex) mask."""
    mask = np.asarray(mask).astype(bool)
    rs, cs = np.nonzero(mask)
    if len(rs) == 0:
        raise MaskError("empty mask")
    cx, cy = cs.mean(), rs.mean()
    ri, ci = int(round(cy)), int(round(cx))
    if 0 <= ri < mask.shape[0] and 0 <= ci < mask.shape[1] and mask[ri, ci]:
        return np.array([cx, cy])
    dist = ndimage.distance_transform_edt(mask)
    r, c = np.unravel_index(int(np.argmax(dist)), dist.shape)
    return np.array([float(c), float(r)])


def build_structure(contour: Contour, spacing: float, mask: np.ndarray) -> ObjectStructure:
    """Resample the contour at arc-length interval `spacing`, pick the fan
    center from the mask, and precompute the similarity-invariant local
    coordinates of every consecutive sample pair."""
    if contour.perimeter() < 2.0 * spacing:
        raise MaskError("contour perimeter too short for the requested sample spacing")
    samples = _resample_closed(contour.points, spacing)
    center = mask_centroid(mask)
    n = len(samples)
    coords = np.empty((n, 2))
    for i in range(n):
        coords[i] = local_coordinates(center, samples[i], samples[(i + 1) % n])
    return ObjectStructure(center=center, samples=samples, local_coords=coords,
                           sample_weights=np.ones(n))


def apply_overlap_weights(struct: ObjectStructure, overlap_mask: np.ndarray,
                          factor: float = 0.5) -> ObjectStructure:
    """Down-weight samples that sit inside the inter-image overlap region."""
    overlap_mask = np.asarray(overlap_mask).astype(bool)
    h, w = overlap_mask.shape
    weights = struct.sample_weights.copy()
    for i, (x, y) in enumerate(struct.samples):
        ri = min(max(int(round(y)), 0), h - 1)
        ci = min(max(int(round(x)), 0), w - 1)
        if overlap_mask[ri, ci]:
            weights[i] *= factor
    return ObjectStructure(center=struct.center, samples=struct.samples,
                           local_coords=struct.local_coords, sample_weights=weights)


def structures_from_maskset(ms: MaskSet, spacing: float,
                            min_area_fraction: float = 0.0) -> list:
    """Full mask pipeline: filter tiny masks, trace, build one fan each.

    Masks whose contour is too short for the spacing are skipped.
    """
    filtered = filter_small_masks(ms, min_area_fraction) if min_area_fraction > 0 else ms
    out = []
    for mask in filtered.masks:
        try:
            contour = trace_contour(mask)
            out.append(build_structure(contour, spacing, mask))
        except MaskError:
            continue
    return out
