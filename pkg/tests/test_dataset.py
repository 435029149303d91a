import hashlib
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiervid.dataset import (CountMismatchError, MalformedPoseError, MissingFramesError,
                             PoseFrame, SwapMap, SynthConfig, VideoClip, crop_temporal_tube,
                             from_pixels, hflip, hflip_augment, hflip_pose, landmark_boxes,
                             load_clip, load_split, load_swap_map, render_figure, save_clip,
                             swap_map_for, synth_clip, synth_generate, to_pixels, tube_from_boxes,
                             tube_to_pixels)


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_generate_is_deterministic(tmp_path, tiny_config):
    a = synth_generate(tiny_config, 7, tmp_path / "a")
    b = synth_generate(tiny_config, 7, tmp_path / "b")
    assert tree_digest(a) == tree_digest(b)
    c = synth_generate(tiny_config, 8, tmp_path / "c")
    assert tree_digest(a) != tree_digest(c)


def test_synth_generate_counts(tmp_path):
    cfg = SynthConfig(n_train=200, n_test=40, image_size=16)
    root = synth_generate(cfg, 1, tmp_path)
    dirs = [p for split in ("train", "test") for p in (root / split).iterdir()]
    assert len(dirs) == 240
    for d in dirs[::37]:
        assert len(list((d / "frames").glob("*.png"))) == 40
        assert len((d / "pose.jsonl").read_text().strip().splitlines()) == 40
    meta = json.loads((dirs[0] / "meta.json").read_text())
    assert (meta["L"], meta["H"], meta["W"]) == (6, 16, 16)


def test_synth_rejects_bad_configs(tmp_path):
    with pytest.raises(ValueError):
        synth_generate(SynthConfig(n_landmarks=3), 0, tmp_path)
    with pytest.raises(ValueError):
        synth_generate(SynthConfig(clip_length=10, k=10), 0, tmp_path)


def test_synth_generate_unwritable(tmp_path, tiny_config):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        synth_generate(tiny_config, 0, blocker / "sub")


def test_rendered_limb_covers_centre():
    # a landmark placed at (0, 0) must be drawn over the image centre
    coords = np.array([[0.0, -0.6], [-0.5, 0.2], [0.5, 0.2], [0.0, 0.0],
                       [-0.3, 0.6], [0.3, 0.6]])
    bg = np.zeros((64, 64, 3))
    app = dict(background=bg, limb_colors=[np.ones(3)] * 5, head_color=np.ones(3),
               limb_radius=2.0, head_radius=4.0)
    img = render_figure(coords, app, 64)
    cx = to_pixels(np.zeros(2), 64, 64)
    r, c = int(round(cx[1])), int(round(cx[0]))
    assert img[r - 1:r + 2, c - 1:c + 2].max() > 0.9
    assert img[2, 2].max() == 0.0


def test_synthetic_root_landmark_is_drawn(clip):
    # the pixel under the (visible) root landmark differs from the bare background
    h, w = clip.size
    pix = np.rint(to_pixels(clip.coords[:, 3], w, h)).astype(int)
    corner = clip.frames[:, 0, 0]
    under = clip.frames[np.arange(len(clip)), pix[:, 1], pix[:, 0]]
    assert np.all(np.abs(under - corner).max(-1) > 0.05)


def test_synthetic_clip_valid(clip):
    clip.validate(k=10)
    assert clip.frames.dtype == np.float32
    assert clip.frames.min() >= -1 and clip.frames.max() <= 1


def test_roundtrip(tmp_path, clip):
    save_clip(clip, tmp_path / "c")
    back = load_clip(tmp_path / "c")
    assert np.abs(back.frames - clip.frames).max() <= 1 / 255
    np.testing.assert_array_equal(back.coords, clip.coords)
    np.testing.assert_array_equal(back.visible, clip.visible)
    assert back.action_label == clip.action_label
    back.validate()


def test_load_errors_are_distinct(tmp_path, clip):
    d = save_clip(clip, tmp_path / "c")
    lines = (d / "pose.jsonl").read_text().splitlines()
    (d / "pose.jsonl").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(CountMismatchError):
        load_clip(d)
    (d / "pose.jsonl").write_text("\n".join(lines[:-1] + ['{"t": 19, "coords": 5}']) + "\n")
    with pytest.raises(MalformedPoseError):
        load_clip(d)
    (d / "pose.jsonl").write_text("\n".join(lines) + "\n")
    (d / "frames" / "000003.png").unlink()
    with pytest.raises(MissingFramesError):
        load_clip(d)
    assert not issubclass(CountMismatchError, MalformedPoseError)


def test_load_pixel_coordinates(tmp_path, clip):
    d = save_clip(clip, tmp_path / "c")
    pix = to_pixels(clip.coords, 64, 64)
    recs = [json.dumps({"t": t, "coords": pix[t].tolist(), "visible": clip.visible[t].tolist()})
            for t in range(len(clip))]
    (d / "pose.jsonl").write_text("\n".join(recs) + "\n")
    meta = json.loads((d / "meta.json").read_text())
    meta["coord_space"] = "pixel"
    (d / "meta.json").write_text(json.dumps(meta))
    np.testing.assert_allclose(load_clip(d).coords, clip.coords, atol=1e-12)


def test_load_split_and_swap(tmp_path, tiny_config):
    root = synth_generate(tiny_config, 3, tmp_path)
    clips = load_split(root, "train")
    assert [c.clip_id for c in clips] == ["train_00000", "train_00001", "train_00002"]
    assert load_swap_map(root) == swap_map_for(6)


def test_swapmap():
    with pytest.raises(ValueError):
        SwapMap(((1, 2), (2, 3)))
    s = SwapMap(((1, 2), (4, 5)))
    np.testing.assert_array_equal(s.permutation(6), [0, 2, 1, 3, 5, 4])
    assert SwapMap.from_json(s.to_json()) == s


def test_pose_frame_invariants():
    with pytest.raises(ValueError):
        PoseFrame(np.zeros((3, 2)), np.ones(2, bool))
    with pytest.raises(ValueError):
        PoseFrame([[1.5, 0.0]], [True]).validate()
    PoseFrame([[1.5, 0.0]], [False]).validate()


def test_clip_count_mismatch_reported():
    c = VideoClip(np.zeros((5, 8, 8, 3), np.float32), np.zeros((4, 6, 2)), np.ones((4, 6), bool))
    with pytest.raises(CountMismatchError):
        c.validate()


def test_pixel_mapping_corners():
    np.testing.assert_allclose(to_pixels([[-1, -1], [1, 1], [0, 0]], 64, 64),
                               [[0, 0], [63, 63], [31.5, 31.5]])
    q = np.random.default_rng(0).uniform(-1, 1, (10, 2))
    np.testing.assert_allclose(from_pixels(to_pixels(q, 40, 30), 40, 30), q)


# -- temporal tube ------------------------------------------------------------------

def test_tube_full_frame_is_identity(clip):
    boxes = np.tile([0.0, 0.0, 63.0, 63.0], (len(clip), 1))
    out = crop_temporal_tube(clip, boxes)
    np.testing.assert_allclose(out.frames, clip.frames, atol=1e-6)
    np.testing.assert_allclose(out.coords, clip.coords, atol=1e-12)
    np.testing.assert_array_equal(out.visible, clip.visible)


def test_tube_centre_maps_to_origin(clip):
    boxes = np.tile([10.0, 20.0, 30.0, 36.0], (len(clip), 1))
    coords = clip.coords.copy()
    coords[:, 0] = from_pixels([20.0, 28.0], 64, 64)
    c = VideoClip(clip.frames, coords, np.ones_like(clip.visible), "x")
    c.visible[:] = False
    c.visible[:, 0] = True
    out = crop_temporal_tube(c, boxes)
    np.testing.assert_allclose(out.coords[:, 0], 0.0, atol=1e-12)


def test_tube_affine_oracle(clip):
    boxes = landmark_boxes(clip)
    out = crop_temporal_tube(clip, boxes)
    # independent construction: union box, squared around its centre
    x0, y0 = np.nanmin(boxes[:, 0]), np.nanmin(boxes[:, 1])
    x1, y1 = np.nanmax(boxes[:, 2]), np.nanmax(boxes[:, 3])
    side = max(x1 - x0, y1 - y0)
    left, top = (x0 + x1) / 2 - side / 2, (y0 + y1) / 2 - side / 2
    pix = to_pixels(clip.coords, 64, 64)
    expect = np.stack([2 * (pix[..., 0] - left) / side - 1, 2 * (pix[..., 1] - top) / side - 1],
                      -1)
    vis = out.visible
    np.testing.assert_allclose(out.coords[vis], expect[vis], atol=1e-9)
    # and denormalisation reproduces pixel positions
    back = tube_to_pixels(out.coords, tube_from_boxes(boxes))
    assert np.abs(back[vis] - pix[vis]).max() < 1.0
    out.validate()


def test_tube_marks_outside_landmarks_invisible(clip):
    boxes = np.tile([0.0, 0.0, 63.0, 63.0], (len(clip), 1))
    boxes[:, 2] = 40.0
    boxes[:, 3] = 40.0
    c = VideoClip(clip.frames, clip.coords.copy(), clip.visible.copy(), "x")
    pix = to_pixels(c.coords, 64, 64)
    c.visible &= (pix <= 40).all(-1)
    c.coords[:, 5] = from_pixels([60.0, 60.0], 64, 64)
    c.visible[:, 5] = False
    out = crop_temporal_tube(c, boxes)
    assert not out.visible[:, 5].any()
    assert np.abs(out.coords[:, 5]).max() > 1.0
    np.testing.assert_array_equal(out.visible[:, :5], c.visible[:, :5])


def test_tube_errors(clip):
    with pytest.raises(ValueError, match="empty box"):
        tube_from_boxes(np.full((3, 4), np.nan))
    with pytest.raises(ValueError, match="degenerate"):
        tube_from_boxes([[5.0, 5.0, 5.0, 9.0]])
    with pytest.raises(ValueError, match="empty box"):
        tube_from_boxes([[5.0, 5.0, 4.0, 9.0]])
    with pytest.raises(ValueError):
        crop_temporal_tube(clip, np.tile([0.0, 0.0, 2.0, 2.0], (len(clip), 1)))


# -- flips --------------------------------------------------------------------------

def test_flip_involution_and_columns(clip):
    swap = swap_map_for(6)
    f = hflip(clip, swap)
    np.testing.assert_array_equal(f.frames[:, :, 5], clip.frames[:, :, 64 - 1 - 5])
    back = hflip(f, swap)
    np.testing.assert_array_equal(back.frames, clip.frames)
    np.testing.assert_array_equal(back.coords, clip.coords)
    np.testing.assert_array_equal(back.visible, clip.visible)
    assert sorted(f.visible.ravel()) == sorted(clip.visible.ravel())


def test_flip_negates_x_and_swaps():
    p = PoseFrame([[0.25, 0.1], [0.5, 0.0], [-0.3, 0.2], [0, 0], [0, 0], [0, 0]],
                  [True, True, False, True, True, True])
    f = hflip_pose(p, swap_map_for(6))
    assert f.coords[0, 0] == -0.25
    np.testing.assert_array_equal(f.coords[2], [-0.5, 0.0])
    assert not f.visible[1] and f.visible[2]


def test_flip_augment_probability(clip):
    swap = swap_map_for(6)
    rng = np.random.default_rng(0)
    flips = sum(not np.array_equal(hflip_augment(clip, swap, rng).coords, clip.coords)
                for _ in range(400))
    assert 160 < flips < 240


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=6, max_size=6),
       st.lists(st.booleans(), min_size=6, max_size=6))
def test_flip_pose_involution(coords, visible):
    p = PoseFrame(coords, visible)
    swap = swap_map_for(6)
    back = hflip_pose(hflip_pose(p, swap), swap)
    np.testing.assert_array_equal(back.coords, p.coords)
    np.testing.assert_array_equal(back.visible, p.visible)
