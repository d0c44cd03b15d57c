"""Feature detection/matching, robust homography estimation and the
global similarity (scale, rotation) extraction used by the solver terms.

The detector is a multi-scale Shi-Tomasi corner detector with
orientation-normalized patch descriptors. Match files can also be imported
so any external feature pipeline can be swapped in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imgcore import Raster


class FeatureError(Exception):
    pass


class InsufficientOverlapError(FeatureError):
    """Fewer usable correspondences than the minimum the pipeline needs."""


@dataclass
class MatchSet:
    """Point correspondences between one image pair.

    p are coordinates in the target image, q in the reference image.
    Stored as (N, 2) arrays plus per-match weights.
    """

    pair_id: tuple
    p: np.ndarray
    q: np.ndarray
    weight: np.ndarray = None

    def __post_init__(self):
        self.p = np.asarray(self.p, dtype=np.float64).reshape(-1, 2)
        self.q = np.asarray(self.q, dtype=np.float64).reshape(-1, 2)
        if len(self.p) != len(self.q):
            raise FeatureError("p/q length mismatch")
        if self.weight is None:
            self.weight = np.ones(len(self.p))
        self.weight = np.asarray(self.weight, dtype=np.float64).reshape(-1)
        if np.any(self.weight < 0):
            raise FeatureError("negative match weight")

    def __len__(self):
        return len(self.p)

    def subset(self, idx) -> "MatchSet":
        return MatchSet(self.pair_id, self.p[idx], self.q[idx], self.weight[idx])

    def canonical_order(self) -> "MatchSet":
        """Lexicographic sort so RANSAC results don't depend on input order."""
        key = np.lexsort((self.q[:, 1], self.q[:, 0], self.p[:, 1], self.p[:, 0]))
        return self.subset(key)


@dataclass
class DetectConfig:
    max_corners: int = 1200
    quality_level: float = 0.01
    min_distance: int = 6
    octaves: int = 3
    patch_radius: int = 8
    ratio: float = 0.8


def _shi_tomasi_response(gray: np.ndarray, sigma: float = 1.5) -> np.ndarray:
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    ixx = ndimage.gaussian_filter(gx * gx, sigma, mode="nearest")
    iyy = ndimage.gaussian_filter(gy * gy, sigma, mode="nearest")
    ixy = ndimage.gaussian_filter(gx * gy, sigma, mode="nearest")
    tr = ixx + iyy
    det = ixx * iyy - ixy * ixy
    disc = np.sqrt(np.maximum(tr * tr / 4.0 - det, 0.0))
    return tr / 2.0 - disc  # smaller eigenvalue of the structure tensor


def _detect_corners(gray: np.ndarray, cfg: DetectConfig):
    """Corner positions (x, y, octave_scale) across a small image pyramid."""
    out = []
    level = gray
    scale = 1.0
    for _ in range(cfg.octaves):
        h, w = level.shape
        if min(h, w) < 4 * cfg.patch_radius:
            break
        resp = _shi_tomasi_response(level)
        maxed = ndimage.maximum_filter(resp, size=2 * cfg.min_distance + 1, mode="nearest")
        thresh = cfg.quality_level * resp.max() if resp.max() > 0 else np.inf
        ys, xs = np.nonzero((resp == maxed) & (resp > thresh))
        vals = resp[ys, xs]
        # strongest first, tie-broken by position for determinism
        order = np.lexsort((xs, ys, -vals))
        margin = 2 * cfg.patch_radius
        for i in order[: cfg.max_corners]:
            x, y = xs[i], ys[i]
            if margin <= x < w - margin and margin <= y < h - margin:
                out.append((x * scale, y * scale, scale))
        level = level[::2, ::2]
        scale *= 2.0
    return out


def _patch_descriptor(gray: np.ndarray, x: float, y: float, scale: float, radius: int):
    """Orientation-normalized, intensity-normalized square patch descriptor."""
    blur = ndimage.gaussian_filter(gray, 1.0 * scale, mode="nearest")
    gxs = ndimage.sobel(blur, axis=1, mode="nearest")
    gys = ndimage.sobel(blur, axis=0, mode="nearest")
    xi, yi = int(round(x)), int(round(y))
    r = int(radius * scale)
    gx = gxs[max(yi - r, 0): yi + r + 1, max(xi - r, 0): xi + r + 1].mean()
    gy = gys[max(yi - r, 0): yi + r + 1, max(xi - r, 0): xi + r + 1].mean()
    ang = math.atan2(gy, gx)
    ca, sa = math.cos(ang), math.sin(ang)
    n = 8
    lin = np.linspace(-radius * scale, radius * scale, n)
    u, v = np.meshgrid(lin, lin)
    sx = x + ca * u - sa * v
    sy = y + sa * u + ca * v
    h, w = gray.shape
    sx = np.clip(sx, 0, w - 1)
    sy = np.clip(sy, 0, h - 1)
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx, fy = sx - x0, sy - y0
    patch = (
        blur[y0, x0] * (1 - fx) * (1 - fy)
        + blur[y0, x1] * fx * (1 - fy)
        + blur[y1, x0] * (1 - fx) * fy
        + blur[y1, x1] * fx * fy
    )
    d = patch.ravel()
    d = d - d.mean()
    norm = np.linalg.norm(d)
    if norm < 1e-12:
        return None
    return d / norm


def detect_and_match(a: Raster, b: Raster, config: DetectConfig | None = None,
                     ransac_threshold: float = 3.0, ransac_iterations: int = 2000,
                     seed: int = 0) -> MatchSet:
    """Detect corners in both images, match descriptors with a ratio test and
    keep RANSAC homography inliers. Deterministic for a fixed seed.

    Raises InsufficientOverlapError when fewer than 4 inliers survive.
    """
    cfg = config or DetectConfig()
    ga, gb = a.to_gray(), b.to_gray()
    ca = _detect_corners(ga, cfg)
    cb = _detect_corners(gb, cfg)
    da, pa = [], []
    for x, y, s in ca:
        d = _patch_descriptor(ga, x, y, s, cfg.patch_radius)
        if d is not None:
            da.append(d)
            pa.append((x, y))
    db, pb = [], []
    for x, y, s in cb:
        d = _patch_descriptor(gb, x, y, s, cfg.patch_radius)
        if d is not None:
            db.append(d)
            pb.append((x, y))
    if len(da) < 4 or len(db) < 4:
        raise InsufficientOverlapError("not enough detectable corners")
    da = np.asarray(da)
    db = np.asarray(db)
    sim = da @ db.T  # unit descriptors: cosine similarity
    raw_p, raw_q = [], []
    best_j = np.argmax(sim, axis=1)
    best_i_for_j = np.argmax(sim, axis=0)
    for i in range(len(da)):
        j = best_j[i]
        if best_i_for_j[j] != i:  # mutual check
            continue
        row = sim[i].copy()
        row[j] = -np.inf
        second = row.max()
        # ratio test on descriptor distance: d = sqrt(2 - 2 cos)
        d1 = math.sqrt(max(2.0 - 2.0 * sim[i, j], 0.0))
        d2 = math.sqrt(max(2.0 - 2.0 * second, 0.0))
        if d2 > 1e-12 and d1 / d2 > cfg.ratio:
            continue
        raw_p.append(pa[i])
        raw_q.append(pb[j])
    if len(raw_p) < 4:
        raise InsufficientOverlapError(f"only {len(raw_p)} tentative matches")
    tentative = MatchSet((0, 1), np.asarray(raw_p), np.asarray(raw_q))
    try:
        _, inliers = estimate_homography_ransac(
            tentative, threshold=ransac_threshold, iterations=ransac_iterations, seed=seed)
    except FeatureError as exc:
        raise InsufficientOverlapError(str(exc)) from exc
    if len(inliers) < 4:
        raise InsufficientOverlapError(f"only {len(inliers)} inlier matches")
    return inliers


# ---------------------------------------------------------------------------
# Homography estimation

def _normalize_points(pts: np.ndarray):
    mean = pts.mean(axis=0)
    d = np.linalg.norm(pts - mean, axis=1).mean()
    s = math.sqrt(2.0) / d if d > 1e-12 else 1.0
    t = np.array([[s, 0, -s * mean[0]], [0, s, -s * mean[1]], [0, 0, 1.0]])
    return t


def _apply_h(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    ph = np.hstack([pts, np.ones((len(pts), 1))]) @ h.T
    w = ph[:, 2]
    if np.any(np.abs(w) < 1e-12):
        return np.full_like(pts, np.inf)
    return ph[:, :2] / w[:, None]


def _dlt(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Normalized direct linear transform mapping p -> q. Raises on degeneracy."""
    tp = _normalize_points(p)
    tq = _normalize_points(q)
    pn = _apply_h(tp, p)
    qn = _apply_h(tq, q)
    n = len(p)
    a = np.zeros((2 * n, 9))
    for i in range(n):
        x, y = pn[i]
        u, v = qn[i]
        a[2 * i] = [-x, -y, -1, 0, 0, 0, u * x, u * y, u]
        a[2 * i + 1] = [0, 0, 0, -x, -y, -1, v * x, v * y, v]
    _, svals, vt = np.linalg.svd(a)
    if svals[-2] < 1e-9 * max(svals[0], 1.0):
        raise FeatureError("degenerate point configuration for homography")
    h = vt[-1].reshape(3, 3)
    h = np.linalg.inv(tq) @ h @ tp
    if abs(h[2, 2]) < 1e-12:
        raise FeatureError("homography normalization failed")
    return h / h[2, 2]


def _collinear4(pts: np.ndarray) -> bool:
    for combo in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        a, b, c = pts[list(combo)]
        cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
        if abs(cross) < 1e-9:
            return True
    return False


def estimate_homography_ransac(m: MatchSet, threshold: float = 3.0,
                               iterations: int = 2000, seed: int = 0):
    """RANSAC + normalized DLT, refined by least squares over the inliers.

    Returns (3x3 homography mapping p -> q, inlier MatchSet). Deterministic
    for a fixed seed; input order is canonicalized first.
    """
    if len(m) < 4:
        raise InsufficientOverlapError(f"need >= 4 matches, got {len(m)}")
    m = m.canonical_order()
    rng = np.random.default_rng(seed)
    n = len(m)
    best_mask = None
    best_count = -1
    for _ in range(iterations):
        idx = rng.choice(n, size=4, replace=False)
        sample_p, sample_q = m.p[idx], m.q[idx]
        if _collinear4(sample_p) or _collinear4(sample_q):
            continue
        try:
            h = _dlt(sample_p, sample_q)
        except FeatureError:
            continue
        err = np.linalg.norm(_apply_h(h, m.p) - m.q, axis=1)
        mask = err <= threshold
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None or best_count < 4:
        raise FeatureError("homography estimation failed: no non-degenerate sample")
    # refine on inliers, then recompute the inlier set once
    h = _dlt(m.p[best_mask], m.q[best_mask])
    err = np.linalg.norm(_apply_h(h, m.p) - m.q, axis=1)
    mask = err <= threshold
    if mask.sum() >= 4:
        h = _dlt(m.p[mask], m.q[mask])
        err = np.linalg.norm(_apply_h(h, m.p) - m.q, axis=1)
        mask = err <= threshold
    else:
        mask = best_mask
    return h, m.subset(mask)


def apply_homography(h: np.ndarray, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    return _apply_h(np.asarray(h, dtype=np.float64), pts)


def fit_similarity(src: np.ndarray, dst: np.ndarray):
    """Least-squares similarity dst ~ [a -b; b a] src + t.

    Returns (a, b, tx, ty). Standard Procrustes normal equations.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cs = src - mu_s
    cd = dst - mu_d
    denom = (cs ** 2).sum()
    if denom < 1e-15:
        raise FeatureError("degenerate similarity fit: coincident points")
    a = (cs[:, 0] * cd[:, 0] + cs[:, 1] * cd[:, 1]).sum() / denom
    b = (cs[:, 0] * cd[:, 1] - cs[:, 1] * cd[:, 0]).sum() / denom
    tx = mu_d[0] - (a * mu_s[0] - b * mu_s[1])
    ty = mu_d[1] - (b * mu_s[0] + a * mu_s[1])
    return a, b, tx, ty


def decompose_similarity(h: np.ndarray, width: int, height: int):
    """Scale and rotation of the best-fit similarity over the image corners.

    Fits the similarity to the homography images of the four domain corners,
    so the estimate respects the region the warp actually acts on.
    """
    h = np.asarray(h, dtype=np.float64)
    if abs(np.linalg.det(h)) < 1e-12:
        raise FeatureError("singular homography")
    corners = np.array([[0.0, 0.0], [width - 1.0, 0.0],
                        [width - 1.0, height - 1.0], [0.0, height - 1.0]])
    mapped = _apply_h(h, corners)
    if not np.all(np.isfinite(mapped)):
        raise FeatureError("homography maps a corner to infinity")
    a, b, _, _ = fit_similarity(corners, mapped)
    return math.hypot(a, b), math.atan2(b, a)


# ---------------------------------------------------------------------------
# Match file I/O: one match per line, "x1 y1 x2 y2 [weight]"

def write_matches(m: MatchSet, path) -> None:
    lines = []
    for i in range(len(m)):
        lines.append(f"{m.p[i,0]:.10g} {m.p[i,1]:.10g} {m.q[i,0]:.10g} "
                     f"{m.q[i,1]:.10g} {m.weight[i]:.10g}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_matches(path, pair_id=(0, 1)) -> MatchSet:
    p, q, w = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (4, 5):
            raise FeatureError(f"{path}:{lineno}: expected 4 or 5 fields, got {len(parts)}")
        try:
            vals = [float(t) for t in parts]
        except ValueError as exc:
            raise FeatureError(f"{path}:{lineno}: non-numeric field") from exc
        p.append(vals[0:2])
        q.append(vals[2:4])
        w.append(vals[4] if len(vals) == 5 else 1.0)
    return MatchSet(pair_id, np.asarray(p).reshape(-1, 2), np.asarray(q).reshape(-1, 2),
                    np.asarray(w))
