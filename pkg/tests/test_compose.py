import numpy as np
import pytest

from conftest import smooth_texture
from meshstitch.compose import (Canvas, ComposeError, Layer, blend,
                                compute_canvas, warp_image)
from meshstitch.imgcore import Raster
from meshstitch.meshwarp import build_mesh


def test_canvas_identity_100x80():
    m = build_mesh((100, 80), 40.0)
    c = compute_canvas([m])
    assert (c.width, c.height) == (102, 82)
    assert c.offset == (1, 1)


def test_canvas_two_meshes_translated():
    m0 = build_mesh((100, 80), 40.0, image_id=0)
    m1 = build_mesh((100, 80), 40.0, image_id=1)
    m1.free = m1.rest + np.array([50.0, 0.0])
    c = compute_canvas([m0, m1])
    assert c.width == 152
    assert c.height == 82


def test_canvas_nan_vertex():
    m = build_mesh((100, 80), 40.0)
    m.free[0, 0, 0] = np.nan
    with pytest.raises(ComposeError):
        compute_canvas([m])


def test_warp_identity_preserves_image():
    img = smooth_texture(100, 80, seed=1)
    m = build_mesh(img, 40.0)
    c = compute_canvas([m])
    layer = warp_image(img, m, c)
    ox, oy = c.offset
    inner = layer.warped[oy:oy + img.height, ox:ox + img.width]
    covered = layer.alpha[oy:oy + img.height, ox:ox + img.width] > 0
    assert covered.mean() > 0.99
    diff = np.abs(inner - img.data).max(axis=-1)
    assert diff[covered].max() <= 1.0 / 255.0


def test_warp_translation():
    img = smooth_texture(100, 80, seed=2)
    m = build_mesh(img, 40.0)
    m.free = m.rest + np.array([7.0, 3.0])
    c = compute_canvas([m])
    layer = warp_image(img, m, c)
    ox, oy = c.offset
    inner = layer.warped[oy + 3:oy + 3 + img.height, ox + 7:ox + 7 + img.width]
    covered = layer.alpha[oy + 3:oy + 3 + img.height, ox + 7:ox + 7 + img.width] > 0
    diff = np.abs(inner - img.data).max(axis=-1)
    assert diff[covered].max() <= 1.0 / 255.0


def _checkerboard(width, height, period):
    xs, ys = np.meshgrid(np.arange(width), np.arange(height))
    board = (((xs // period) + (ys // period)) % 2).astype(np.float64)
    return Raster.from_array(board[:, :, None])


def _autocorr_period(signal):
    s = signal - signal.mean()
    ac = np.correlate(s, s, mode="full")[len(s) - 1:]
    # first positive-going peak after the initial decay
    for lag in range(2, len(ac) - 1):
        if ac[lag] > ac[lag - 1] and ac[lag] >= ac[lag + 1] and ac[lag] > 0:
            return lag
    return None


def test_warp_2x_scale_doubles_checker_period():
    img = _checkerboard(81, 81, 8)
    m = build_mesh(img, 40.0)
    m.free = m.rest * 2.0
    c = compute_canvas([m])
    layer = warp_image(img, m, c)
    ox, oy = c.offset
    row = layer.warped[oy + 80, ox:ox + 160, 0]  # mid-row, fully covered
    src_row = img.data[40, :, 0]
    p_src = _autocorr_period(src_row)
    p_warp = _autocorr_period(row)
    assert p_src == 16  # full checker period = 2 cells
    assert abs(p_warp - 32) <= 2


def test_warp_all_degenerate_mesh():
    img = smooth_texture(60, 60, seed=3)
    m = build_mesh(img, 40.0)
    m.free = np.zeros_like(m.free)
    c = Canvas(offset=(1, 1), width=10, height=10)
    with pytest.raises(ComposeError):
        warp_image(img, m, c)


def test_warp_flipped_triangle_warns(caplog):
    img = smooth_texture(81, 81, seed=4)
    m = build_mesh(img, 40.0)
    # fold one vertex far across its cell to flip triangles
    m.free[1, 1] = [75.0, 75.0]
    c = compute_canvas([m])
    import logging
    with caplog.at_level(logging.WARNING, logger="meshstitch.compose"):
        warp_image(img, m, c)
    assert any("flipped" in r.message for r in caplog.records)


def test_alpha_zero_where_undefined():
    img = smooth_texture(50, 50, seed=5)
    m = build_mesh(img, 40.0)
    c = compute_canvas([m])
    layer = warp_image(img, m, c)
    undefined = layer.alpha == 0
    assert np.all(layer.warped[undefined] == 0)
    assert layer.alpha.max() <= 1.0


def test_blend_single_layer():
    rng = np.random.default_rng(6)
    warped = rng.random((10, 12, 3))
    alpha = np.ones((10, 12))
    out = blend([Layer(warped=warped, alpha=alpha)])
    assert np.abs(out.data - warped).max() < 1e-12


def test_blend_identical_layers():
    rng = np.random.default_rng(7)
    warped = rng.random((8, 8, 3))
    alpha = rng.random((8, 8))
    layers = [Layer(warped=warped.copy(), alpha=alpha.copy()) for _ in range(2)]
    out = blend(layers)
    covered = alpha > 0
    assert np.abs(out.data[covered] - warped[covered]).max() < 1e-12


def test_blend_black_white_overlap():
    black = Layer(warped=np.zeros((4, 4, 1)), alpha=np.ones((4, 4)))
    white = Layer(warped=np.ones((4, 4, 1)), alpha=np.ones((4, 4)))
    out = blend([black, white])
    assert np.abs(out.data - 0.5).max() < 1e-12


def test_blend_order_symmetric():
    rng = np.random.default_rng(8)
    layers = [Layer(warped=rng.random((6, 6, 3)), alpha=rng.random((6, 6)))
              for _ in range(3)]
    a = blend(layers)
    b = blend(layers[::-1])
    assert np.abs(a.data - b.data).max() < 1e-12


def test_blend_mismatched_canvas():
    a = Layer(warped=np.zeros((4, 4, 1)), alpha=np.ones((4, 4)))
    b = Layer(warped=np.zeros((5, 4, 1)), alpha=np.ones((5, 4)))
    with pytest.raises(ComposeError):
        blend([a, b])


def test_blend_empty():
    with pytest.raises(ComposeError):
        blend([])


def test_blend_output_in_unit_range():
    rng = np.random.default_rng(9)
    layers = [Layer(warped=rng.random((6, 6, 3)), alpha=rng.random((6, 6)))
              for _ in range(2)]
    out = blend(layers)
    assert out.data.min() >= 0.0
    assert out.data.max() <= 1.0
