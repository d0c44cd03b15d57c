"""Shared synthetic-scene builders for the test suite."""

import math

import numpy as np
import pytest
from scipy import ndimage

from meshstitch.features import MatchSet, apply_homography
from meshstitch.imgcore import Raster
from meshstitch.masks import MaskSet


def smooth_texture(width, height, seed=7, channels=3):
    """Band-limited random texture so corners/matches are well defined."""
    rng = np.random.default_rng(seed)
    arr = ndimage.gaussian_filter(rng.random((height, width, channels)),
                                  (4, 4, 0))
    arr = (arr - arr.min()) / (arr.max() - arr.min() + 1e-12)
    return Raster.from_array(arr)


def similarity_homography(scale, theta_deg, tx, ty):
    th = math.radians(theta_deg)
    a, b = scale * math.cos(th), scale * math.sin(th)
    return np.array([[a, -b, tx], [b, a, ty], [0.0, 0.0, 1.0]])


def grid_matches(h, width, height, nx=12, ny=9, margin=5.0):
    """Exact correspondences q = h(p) on a grid, kept where both ends are
    inside the width x height domain."""
    gx, gy = np.meshgrid(np.linspace(margin, width - 1 - margin, nx),
                         np.linspace(margin, height - 1 - margin, ny))
    p = np.column_stack([gx.ravel(), gy.ravel()])
    q = apply_homography(h, p)
    inside = ((q[:, 0] >= 0) & (q[:, 0] <= width - 1)
              & (q[:, 1] >= 0) & (q[:, 1] <= height - 1))
    return MatchSet((1, 0), p[inside], q[inside])


def add_squeeze_noise(m, center, amplitude=2.0, fraction=0.3,
                      width=None, height=None, axis=1):
    """Displace the `fraction` of matches nearest `center` by `amplitude`
    pixels toward the center line (a locally non-similar deformation)."""
    center = np.asarray(center, dtype=np.float64)
    n = len(m)
    d = np.linalg.norm(m.p - center, axis=1)
    idx = np.argsort(d)[: int(round(fraction * n))]
    q = m.q.copy()
    sign = np.where(m.p[idx, axis] >= center[axis], -1.0, 1.0)
    q[idx, axis] += amplitude * sign
    if width is not None:
        keep = ((q[:, 0] >= 0) & (q[:, 0] <= width - 1)
                & (q[:, 1] >= 0) & (q[:, 1] <= height - 1))
    else:
        keep = np.ones(n, dtype=bool)
    return MatchSet(m.pair_id, m.p[keep], q[keep], m.weight[keep])


def add_shear_noise(m, center, amplitude=2.0, fraction=0.3,
                    width=None, height=None):
    """Displace the nearest `fraction` of matches by +-amplitude in x
    depending on which side of the center line they sit (shear pattern)."""
    center = np.asarray(center, dtype=np.float64)
    n = len(m)
    d = np.linalg.norm(m.p - center, axis=1)
    idx = np.argsort(d)[: int(round(fraction * n))]
    q = m.q.copy()
    sign = np.where(m.p[idx, 1] >= center[1], 1.0, -1.0)
    q[idx, 0] += amplitude * sign
    if width is not None:
        keep = ((q[:, 0] >= 0) & (q[:, 0] <= width - 1)
                & (q[:, 1] >= 0) & (q[:, 1] <= height - 1))
    else:
        keep = np.ones(n, dtype=bool)
    return MatchSet(m.pair_id, m.p[keep], q[keep], m.weight[keep])


def box_maskset(width, height, x0, y0, x1, y1, image_id=1):
    mask = np.zeros((height, width), dtype=bool)
    mask[y0:y1, x0:x1] = True
    return MaskSet(image_id, [mask], [int(mask.sum())])


@pytest.fixture
def synth_pair():
    """Reference texture, target warped by a known similarity homography."""
    width, height = 360, 280
    h = similarity_homography(1.05, 10.0, 30.0, 10.0)
    # target content: I1(x) = I0(h(x)) sampled from a padded extension of I0
    pad = 120
    big = smooth_texture(width + 2 * pad, height + 2 * pad, seed=7)
    ref = Raster.from_array(big.data[pad:pad + height, pad:pad + width].copy())
    xs, ys = np.meshgrid(np.arange(width, dtype=float),
                         np.arange(height, dtype=float))
    pts = np.column_stack([xs.ravel(), ys.ravel()])
    mapped = apply_homography(h, pts) + pad
    x0 = np.floor(mapped[:, 0]).astype(int)
    y0 = np.floor(mapped[:, 1]).astype(int)
    fx = (mapped[:, 0] - x0)[:, None]
    fy = (mapped[:, 1] - y0)[:, None]
    d = big.data
    tgt = (d[y0, x0] * (1 - fx) * (1 - fy) + d[y0, x0 + 1] * fx * (1 - fy)
           + d[y0 + 1, x0] * (1 - fx) * fy
           + d[y0 + 1, x0 + 1] * fx * fy).reshape(height, width, 3)
    tgt = Raster.from_array(np.clip(tgt, 0.0, 1.0))
    return ref, tgt, h
