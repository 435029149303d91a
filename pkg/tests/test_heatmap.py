import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from hiervid.dataset import PoseFrame, hflip_pose, swap_map_for, to_pixels
from hiervid.heatmap import (composite_background, foreground_mask, render_heatmaps,
                             render_heatmaps_batch, save_debug_png)


def brute_heatmap(pose, sigma, h, w):
    out = np.zeros((pose.n_landmarks, h, w))
    pix = to_pixels(pose.coords, w, h)
    for c in range(pose.n_landmarks):
        if not pose.visible[c]:
            continue
        for r in range(h):
            for q in range(w):
                d2 = (q - pix[c, 0]) ** 2 + (r - pix[c, 1]) ** 2
                out[c, r, q] = math.exp(-d2 / (2 * sigma ** 2))
    return out


def test_peak_at_centre():
    hm = render_heatmaps(PoseFrame([[0.0, 0.0]], [True]), 1.5, (65, 65))
    assert hm[0, 32, 32] == 1.0
    assert hm.max() == 1.0


def test_value_one_pixel_from_peak():
    hm = render_heatmaps(PoseFrame([[0.0, 0.0]], [True]), 1.5, (65, 65))
    assert hm[0, 32, 33] == pytest.approx(math.exp(-1 / 4.5), abs=1e-12)
    assert hm[0, 32, 33] == pytest.approx(0.8007, abs=1e-4)


def test_invisible_channels_zero():
    hm = render_heatmaps(PoseFrame(np.zeros((4, 2)), np.zeros(4, bool)))
    assert not hm.any()
    hm = render_heatmaps(PoseFrame(np.zeros((3, 2)), [True, False, True]))
    assert hm[1].max() == 0 and hm[0].max() > 0 and hm[2].max() > 0


def test_matches_brute_force():
    rng = np.random.default_rng(1)
    pose = PoseFrame(rng.uniform(-1.2, 1.2, (3, 2)), [True, True, False])
    np.testing.assert_allclose(render_heatmaps(pose, 2.0, (12, 17)),
                               brute_heatmap(pose, 2.0, 12, 17), atol=1e-12)


def test_out_of_bounds_tail():
    hm = render_heatmaps(PoseFrame([[1.05, 0.0]], [True]), 1.5, (64, 64))
    assert 0 < hm.max() < 1


def test_batch_matches_single():
    rng = np.random.default_rng(2)
    coords = rng.uniform(-1, 1, (4, 6, 2))
    vis = rng.random((4, 6)) < 0.8
    batch = render_heatmaps_batch(coords, vis, 1.5, (32, 32))
    for b in range(4):
        np.testing.assert_array_equal(batch[b], render_heatmaps(PoseFrame(coords[b], vis[b]),
                                                                1.5, (32, 32)))


def test_bad_sigma():
    with pytest.raises(ValueError):
        render_heatmaps(PoseFrame([[0, 0]], [True]), 0.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=1, max_size=5),
       st.floats(0.7, 4.0))
def test_argmax_near_landmark(coords, sigma):
    pose = PoseFrame(coords, [True] * len(coords))
    hm = render_heatmaps(pose, sigma, (40, 40))
    pix = to_pixels(pose.coords, 40, 40)
    for c in range(len(coords)):
        r, q = np.unravel_index(np.argmax(hm[c]), hm[c].shape)
        assert abs(q - pix[c, 0]) <= 1 and abs(r - pix[c, 1]) <= 1
        assert hm[c].max() <= 1.0


def test_flip_equivariance_on_grid():
    # landmarks on grid points: x = -1 + 2 j / (W - 1)
    w = 33
    rng = np.random.default_rng(3)
    grid = -1 + 2 * rng.integers(0, w, (6, 2)) / (w - 1)
    pose = PoseFrame(grid, rng.random(6) < 0.8)
    swap = swap_map_for(6)
    flipped = render_heatmaps(hflip_pose(pose, swap), 1.5, (w, w))
    mirrored = render_heatmaps(pose, 1.5, (w, w))[swap.permutation(6)][:, :, ::-1]
    assert np.abs(flipped - mirrored).max() <= 1e-6


def test_mask_empty_for_zero_stack():
    assert not foreground_mask(np.zeros((3, 16, 16))).any()


def test_mask_disk_radius():
    sigma = 3.0
    hm = render_heatmaps(PoseFrame([[0.0, 0.0]], [True]), sigma, (65, 65))
    mask = foreground_mask(hm, 0.5, 0)
    radius = sigma * math.sqrt(2 * math.log(2))
    yy, xx = np.mgrid[0:65, 0:65]
    d = np.hypot(yy - 32, xx - 32)
    assert mask[d <= radius - 1].all()
    assert not mask[d >= radius + 1].any()


def test_mask_dilation_monotone():
    rng = np.random.default_rng(4)
    pose = PoseFrame(rng.uniform(-0.8, 0.8, (6, 2)), np.ones(6, bool))
    hm = render_heatmaps(pose)
    m0 = foreground_mask(hm, 0.3, 0)
    m1 = foreground_mask(hm, 0.3, 1)
    assert m0.any() and np.all(m1 >= m0) and m1.sum() > m0.sum()


def test_mask_rejects_threshold():
    with pytest.raises(ValueError):
        foreground_mask(np.zeros((1, 4, 4)), 1.0)


def test_composite_cases():
    rng = np.random.default_rng(5)
    pred = rng.uniform(-1, 1, (8, 8, 3))
    last = rng.uniform(-1, 1, (8, 8, 3))
    np.testing.assert_array_equal(composite_background(pred, last, np.ones((8, 8), bool)), pred)
    np.testing.assert_array_equal(composite_background(pred, last, np.zeros((8, 8), bool)), last)
    checker = (np.add.outer(np.arange(8), np.arange(8)) % 2).astype(bool)
    out = composite_background(pred, last, checker)
    for r in range(8):
        for c in range(8):
            src = pred if checker[r, c] else last
            np.testing.assert_array_equal(out[r, c], src[r, c])
    with pytest.raises(ValueError):
        composite_background(pred, last[:4], checker)


def test_debug_png(tmp_path):
    hm = render_heatmaps(PoseFrame([[0, 0], [0.5, 0.5]], [True, True]), 1.5, (16, 16))
    save_debug_png(hm, tmp_path / "hm.png")
    img = Image.open(tmp_path / "hm.png")
    assert getattr(img, "n_frames", 1) == 2
