"""Stick-figure video datasets: synthesis, on-disk clip format and preprocessing.

Frames live in memory as float arrays in [-1, 1] with shape (H, W, 3). Pose
coordinates are (x, y) pairs in [-1, 1] where x runs along image columns and
y along rows (downwards); ``to_pixels`` / ``from_pixels`` convert between the
two conventions using pixel centres, so -1 maps to pixel 0 and +1 to W-1.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage


class ClipFormatError(ValueError):
    """Base class for malformed clip directories."""


class MissingFramesError(ClipFormatError):
    pass


class CountMismatchError(ClipFormatError):
    pass


class MalformedPoseError(ClipFormatError):
    pass


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass
class PoseFrame:
    coords: np.ndarray  # (L, 2)
    visible: np.ndarray  # (L,) bool

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if len(self.coords) != len(self.visible):
            raise ValueError(
                f"coords has {len(self.coords)} landmarks but visible has {len(self.visible)}")

    @property
    def n_landmarks(self) -> int:
        return len(self.visible)

    def validate(self):
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("non-finite pose coordinates")
        vis = self.coords[self.visible]
        if vis.size and (vis.min() < -1.0 or vis.max() > 1.0):
            raise ValueError("visible landmark outside [-1, 1]")


@dataclass
class VideoClip:
    frames: np.ndarray  # (N, H, W, 3) float32 in [-1, 1]
    coords: np.ndarray  # (N, L, 2)
    visible: np.ndarray  # (N, L) bool
    clip_id: str = "clip"
    action_label: str = ""

    def __len__(self):
        return len(self.frames)

    @property
    def n_landmarks(self) -> int:
        return self.coords.shape[1]

    @property
    def size(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    def pose(self, t: int) -> PoseFrame:
        return PoseFrame(self.coords[t], self.visible[t])

    @property
    def poses(self) -> list[PoseFrame]:
        return [self.pose(t) for t in range(len(self))]

    def validate(self, k: int = 1):
        n = len(self.frames)
        if len(self.coords) != n or len(self.visible) != n:
            raise CountMismatchError(
                f"{self.clip_id}: {n} frames but {len(self.coords)} pose records")
        if n < k + 1:
            raise ValueError(f"{self.clip_id}: clip length {n} < k+1 = {k + 1}")
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"{self.clip_id}: frames must be (N, H, W, 3)")
        if self.frames.min() < -1.0 or self.frames.max() > 1.0:
            raise ValueError(f"{self.clip_id}: pixel values outside [-1, 1]")
        for t in range(n):
            self.pose(t).validate()


@dataclass(frozen=True)
class SwapMap:
    pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        seen = [i for p in self.pairs for i in p]
        if len(seen) != len(set(seen)):
            raise ValueError("swap pairs must be disjoint")

    def permutation(self, n_landmarks: int) -> np.ndarray:
        perm = np.arange(n_landmarks)
        for a, b in self.pairs:
            perm[a], perm[b] = b, a
        return perm

    def to_json(self) -> str:
        return json.dumps({"pairs": [list(p) for p in self.pairs]})

    @classmethod
    def from_json(cls, text: str) -> "SwapMap":
        return cls(tuple(tuple(p) for p in json.loads(text)["pairs"]))


def to_pixels(coords, width: int, height: int) -> np.ndarray:
    coords = np.asarray(coords, dtype=np.float64)
    out = np.empty_like(coords)
    out[..., 0] = (coords[..., 0] + 1.0) * 0.5 * (width - 1)
    out[..., 1] = (coords[..., 1] + 1.0) * 0.5 * (height - 1)
    return out


def from_pixels(pix, width: int, height: int) -> np.ndarray:
    pix = np.asarray(pix, dtype=np.float64)
    out = np.empty_like(pix)
    out[..., 0] = pix[..., 0] / (width - 1) * 2.0 - 1.0
    out[..., 1] = pix[..., 1] / (height - 1) * 2.0 - 1.0
    return out


def to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(frames) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32) / 127.5) - 1.0


# ---------------------------------------------------------------------------
# Skeletons and motion synthesis
# ---------------------------------------------------------------------------

# name, limb list, swap pairs. Limbs index landmarks; -1 denotes the neck,
# which is derived from head and root and never stored.
SKELETONS = {
    4: (("head", "l_hand", "r_hand", "root"),
        ((0, 3), (-1, 1), (-1, 2)),
        ((1, 2),)),
    6: (("head", "l_hand", "r_hand", "root", "l_foot", "r_foot"),
        ((0, 3), (3, 4), (3, 5), (-1, 1), (-1, 2)),
        ((1, 2), (4, 5))),
    10: (("head", "l_elbow", "l_hand", "r_elbow", "r_hand",
          "root", "l_knee", "l_foot", "r_knee", "r_foot"),
         ((0, 5), (5, 6), (6, 7), (5, 8), (8, 9), (-1, 1), (1, 2), (-1, 3), (3, 4)),
         ((1, 3), (2, 4), (6, 8), (7, 9))),
}

MOTIONS = ("jumping_jack", "swing", "walk")
NECK_FRACTION = 0.25


def skeleton(n_landmarks: int):
    if n_landmarks < 4:
        raise ValueError(f"need at least 4 landmarks, got {n_landmarks}")
    if n_landmarks not in SKELETONS:
        raise ValueError(f"no stick-figure skeleton with {n_landmarks} landmarks "
                         f"(available: {sorted(SKELETONS)})")
    return SKELETONS[n_landmarks]


def swap_map_for(n_landmarks: int) -> SwapMap:
    return SwapMap(skeleton(n_landmarks)[2])


@dataclass
class SynthConfig:
    n_landmarks: int = 6
    image_size: int = 64
    clip_length: int = 40
    k: int = 10
    motions: tuple[str, ...] = MOTIONS
    n_train: int = 200
    n_test: int = 40
    period_range: tuple[float, float] = (10.0, 24.0)
    drop_prob: float = 0.02
    bg_texture: float = 0.08

    def validate(self):
        skeleton(self.n_landmarks)
        if self.clip_length <= self.k:
            raise ValueError(f"clip_length ({self.clip_length}) must exceed k ({self.k})")
        unknown = set(self.motions) - set(MOTIONS)
        if unknown or not self.motions:
            raise ValueError(f"unknown motion families: {sorted(unknown)}")
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")


def _arm(anchor, length, angle):
    # angle measured from straight down, positive towards image-left
    return anchor + length * np.stack([-np.sin(angle), np.cos(angle)], -1)


def _limb_chain(anchor, length, angle, bend):
    mid = _arm(anchor, length / 2, angle)
    return mid, _arm(mid, length / 2, angle + bend)


def motion_trajectory(motion: str, n_frames: int, n_landmarks: int,
                      rng: np.random.Generator, period: float = 16.0) -> np.ndarray:
    """Landmark trajectories (n_frames, L, 2) of one parametric periodic motion."""
    scale = rng.uniform(0.95, 1.15)
    cx = rng.uniform(-0.08, 0.08)
    phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.8, 1.2)
    t = np.arange(n_frames)
    phi = 2 * np.pi * t / period + phase

    torso, arm_len, leg_len = 0.55 * scale, 0.5 * scale, 0.55 * scale
    root = np.stack([np.full(n_frames, cx), np.full(n_frames, 0.12 * scale)], -1)
    lean = np.zeros(n_frames)
    if motion == "jumping_jack":
        s = (1 - np.cos(phi)) / 2
        root[:, 1] -= 0.08 * amp * s
        arm_l = np.deg2rad(np.minimum(20 + 130 * amp * s, 160))
        arm_r = -arm_l
        leg_l = np.deg2rad(8 + 22 * amp * s)
        leg_r = -leg_l
        bend_a = np.zeros(n_frames)
        bend_l = np.zeros(n_frames)
    elif motion == "swing":
        swing = np.deg2rad(95) * amp * np.sin(phi)
        arm_l = swing + np.deg2rad(8)
        arm_r = swing - np.deg2rad(8)
        leg_l = np.full(n_frames, np.deg2rad(14))
        leg_r = -leg_l
        lean = 0.15 * swing
        bend_a = np.full(n_frames, 0.3)
        bend_l = np.zeros(n_frames)
    elif motion == "walk":
        stride = np.deg2rad(32) * amp * np.sin(phi)
        root[:, 1] -= 0.04 * amp * np.abs(np.cos(phi))
        leg_l, leg_r = stride, -stride
        arm_l, arm_r = -0.8 * stride, 0.8 * stride
        bend_a = np.full(n_frames, -0.4)
        bend_l = 0.5 * np.clip(np.cos(phi), 0, None)
    else:
        raise ValueError(f"unknown motion {motion!r}")

    head = root + torso * np.stack([np.sin(lean), -np.cos(lean)], -1)
    neck = head + NECK_FRACTION * (root - head)
    l_elbow, l_hand = _limb_chain(neck, arm_len, arm_l, bend_a)
    r_elbow, r_hand = _limb_chain(neck, arm_len, arm_r, -bend_a)
    l_knee, l_foot = _limb_chain(root, leg_len, leg_l, -bend_l)
    r_knee, r_foot = _limb_chain(root, leg_len, leg_r, bend_l)
    named = dict(head=head, root=root, l_hand=l_hand, r_hand=r_hand, l_foot=l_foot,
                 r_foot=r_foot, l_elbow=l_elbow, r_elbow=r_elbow, l_knee=l_knee,
                 r_knee=r_knee)
    names = skeleton(n_landmarks)[0]
    return np.stack([named[n] for n in names], axis=1)


def _segment_distance(px, py, a, b):
    d = b - a
    denom = float(d @ d)
    if denom == 0:
        u = np.zeros_like(px)
    else:
        u = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + u * d[0]), py - (a[1] + u * d[1]))


def render_figure(coords: np.ndarray, appearance: dict, size: int) -> np.ndarray:
    """Draw one frame of the stick figure with anti-aliased capsules, values in [0, 1]."""
    n_landmarks = len(coords)
    _, limbs, _ = skeleton(n_landmarks)
    pix = to_pixels(coords, size, size)
    head_i, root_i = 0, _names_index(n_landmarks, "root")
    neck = pix[head_i] + NECK_FRACTION * (pix[root_i] - pix[head_i])
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = appearance["background"].copy()
    radius = appearance["limb_radius"]
    for (a, b), color in zip(limbs, appearance["limb_colors"]):
        pa = neck if a == -1 else pix[a]
        pb = neck if b == -1 else pix[b]
        dist = _segment_distance(xx, yy, pa, pb)
        alpha = np.clip(radius + 0.5 - dist, 0.0, 1.0)[..., None]
        img = img * (1 - alpha) + color * alpha
    dist = np.hypot(xx - pix[head_i, 0], yy - pix[head_i, 1])
    alpha = np.clip(appearance["head_radius"] + 0.5 - dist, 0.0, 1.0)[..., None]
    img = img * (1 - alpha) + appearance["head_color"] * alpha
    return img


def _names_index(n_landmarks: int, name: str) -> int:
    return skeleton(n_landmarks)[0].index(name)


def _distinct_color(rng, avoid, min_dist=0.35):
    for _ in range(100):
        c = rng.uniform(0.0, 1.0, 3)
        if all(np.linalg.norm(c - a) >= min_dist for a in avoid):
            return c
    return c


def random_appearance(rng: np.random.Generator, size: int, n_landmarks: int,
                      bg_texture: float) -> dict:
    bg_color = rng.uniform(0.15, 0.85, 3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    fx, fy = rng.uniform(0.5, 1.5, 2)
    ph = rng.uniform(0, 2 * np.pi, 2)
    pattern = np.sin(2 * np.pi * fx * xx + ph[0]) * np.cos(2 * np.pi * fy * yy + ph[1])
    background = np.clip(bg_color + bg_texture * pattern[..., None] * rng.uniform(-1, 1, 3),
                         0, 1)
    n_limbs = len(skeleton(n_landmarks)[1])
    colors = []
    for _ in range(n_limbs):
        colors.append(_distinct_color(rng, [bg_color]))
    return dict(background=background, limb_colors=colors,
                head_color=_distinct_color(rng, [bg_color]),
                limb_radius=size / 32.0, head_radius=size / 14.0)


def synth_clip(config: SynthConfig, rng: np.random.Generator, clip_id: str) -> VideoClip:
    motion = config.motions[int(rng.integers(len(config.motions)))]
    period = rng.uniform(*config.period_range)
    coords = motion_trajectory(motion, config.clip_length, config.n_landmarks, rng, period)
    app = random_appearance(rng, config.image_size, config.n_landmarks, config.bg_texture)
    frames = np.stack([render_figure(c, app, config.image_size) for c in coords])
    frames = from_uint8(np.clip(np.rint(frames * 255), 0, 255).astype(np.uint8))
    inside = np.all(np.abs(coords) <= 1.0, axis=-1)
    dropped = rng.random(inside.shape) < config.drop_prob
    return VideoClip(frames, coords, inside & ~dropped, clip_id, motion)


def synth_generate(config: SynthConfig, seed: int, root) -> Path:
    """Write a train/test synthetic dataset under ``root``; pure in (config, seed)."""
    config.validate()
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset root {root}: {exc}") from exc
    if not os.access(root, os.W_OK):
        raise PermissionError(f"dataset root {root} is not writable")
    seqs = np.random.SeedSequence(seed).spawn(2)
    for split, n, ss in (("train", config.n_train, seqs[0]), ("test", config.n_test, seqs[1])):
        rngs = [np.random.default_rng(s) for s in ss.spawn(n)]
        for i, rng in enumerate(rngs):
            clip = synth_clip(config, rng, f"{split}_{i:05d}")
            save_clip(clip, root / split / clip.clip_id)
    (root / "swap_map.json").write_text(swap_map_for(config.n_landmarks).to_json())
    return root


# ---------------------------------------------------------------------------
# Clip directory I/O
# ---------------------------------------------------------------------------

def save_clip(clip: VideoClip, path) -> Path:
    path = Path(path)
    (path / "frames").mkdir(parents=True, exist_ok=True)
    pixels = to_uint8(clip.frames)
    for t, frame in enumerate(pixels):
        Image.fromarray(frame, mode="RGB").save(path / "frames" / f"{t:06d}.png")
    write_pose_records(clip.coords, clip.visible, path / "pose.jsonl")
    h, w = clip.size
    meta = {"clip_id": clip.clip_id, "action_label": clip.action_label,
            "L": clip.n_landmarks, "H": h, "W": w}
    (path / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
    return path


def write_pose_records(coords, visible, path):
    with open(path, "w") as fh:
        for t, (c, v) in enumerate(zip(coords, visible)):
            rec = {"t": t, "coords": [[float(x), float(y)] for x, y in c],
                   "visible": [bool(b) for b in v]}
            fh.write(json.dumps(rec) + "\n")


def read_pose_records(path, n_landmarks: int | None = None):
    coords, visible = [], []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                c = np.asarray(rec["coords"], dtype=np.float64)
                v = np.asarray(rec["visible"], dtype=bool)
            except (ValueError, KeyError, TypeError) as exc:
                raise MalformedPoseError(f"{path}:{line_no}: {exc}") from exc
            if c.ndim != 2 or c.shape[1] != 2 or v.shape != (len(c),):
                raise MalformedPoseError(f"{path}:{line_no}: bad coords/visible shapes")
            if n_landmarks is not None and len(c) != n_landmarks:
                raise MalformedPoseError(
                    f"{path}:{line_no}: expected {n_landmarks} landmarks, got {len(c)}")
            if rec.get("t", len(coords)) != len(coords):
                raise MalformedPoseError(f"{path}:{line_no}: out-of-order record t={rec['t']}")
            coords.append(c)
            visible.append(v)
    if not coords:
        return np.zeros((0, n_landmarks or 0, 2)), np.zeros((0, n_landmarks or 0), bool)
    return np.stack(coords), np.stack(visible)


def load_clip(path) -> VideoClip:
    path = Path(path)
    meta_path = path / "meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    frame_files = sorted((path / "frames").glob("*.png"))
    if not frame_files:
        raise MissingFramesError(f"{path}: no frames found")
    expected = [f"{t:06d}.png" for t in range(len(frame_files))]
    if [f.name for f in frame_files] != expected:
        raise MissingFramesError(f"{path}: frame numbering has gaps")
    frames = from_uint8(np.stack([np.asarray(Image.open(f).convert("RGB"))
                                  for f in frame_files]))
    if not (path / "pose.jsonl").exists():
        raise MalformedPoseError(f"{path}: pose.jsonl missing")
    coords, visible = read_pose_records(path / "pose.jsonl", meta.get("L"))
    if len(coords) != len(frames):
        raise CountMismatchError(
            f"{path}: {len(frames)} frames but {len(coords)} pose records")
    h, w = frames.shape[1:3]
    if "H" in meta and (meta["H"], meta["W"]) != (h, w):
        raise ClipFormatError(f"{path}: meta says {meta['H']}x{meta['W']}, frames are {h}x{w}")
    if meta.get("coord_space", "normalized") == "pixel":
        coords = from_pixels(coords, w, h)
    inside = np.all(np.abs(coords) <= 1.0, axis=-1)
    return VideoClip(frames, coords, visible & inside,
                     meta.get("clip_id", path.name), meta.get("action_label", ""))


def load_split(root, split: str) -> list[VideoClip]:
    return [load_clip(p) for p in sorted((Path(root) / split).iterdir()) if p.is_dir()]


def load_swap_map(root) -> SwapMap:
    return SwapMap.from_json((Path(root) / "swap_map.json").read_text())


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def landmark_boxes(clip: VideoClip, pad: float = 0.1) -> np.ndarray:
    """Per-frame (x0, y0, x1, y1) pixel boxes around visible landmarks, padded by ``pad``."""
    h, w = clip.size
    pix = to_pixels(clip.coords, w, h)
    boxes = []
    for p, v in zip(pix, clip.visible):
        if not v.any():
            boxes.append((np.nan,) * 4)
            continue
        lo, hi = p[v].min(0), p[v].max(0)
        margin = pad * (hi - lo)
        boxes.append((*(lo - margin), *(hi + margin)))
    return np.asarray(boxes, dtype=np.float64)


def tube_from_boxes(boxes) -> tuple[float, float, float]:
    """Square tube (cx, cy, side) enclosing the union of the given boxes."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    valid = ~np.isnan(boxes).any(1)
    if not valid.any():
        raise ValueError("empty box: no valid tube boxes")
    b = boxes[valid]
    if np.any(b[:, 2] < b[:, 0]) or np.any(b[:, 3] < b[:, 1]):
        raise ValueError("empty box: x1 < x0 or y1 < y0")
    x0, y0 = b[:, 0].min(), b[:, 1].min()
    x1, y1 = b[:, 2].max(), b[:, 3].max()
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        raise ValueError("degenerate tube: zero area")
    return (x0 + x1) / 2, (y0 + y1) / 2, max(x1 - x0, y1 - y0)


def crop_temporal_tube(clip: VideoClip, boxes, out_size: tuple[int, int] | None = None
                       ) -> VideoClip:
    """Crop every frame to one square tube covering all per-frame boxes.

    Boxes are in pixel-centre coordinates; the full frame is (0, 0, W-1, H-1).
    """
    h, w = clip.size
    out_h, out_w = out_size or (h, w)
    boxes = np.asarray(boxes, dtype=np.float64).reshape(len(clip), 4)
    pix = to_pixels(clip.coords, w, h)
    for t, (box, p, v) in enumerate(zip(boxes, pix, clip.visible)):
        if np.isnan(box).any() or not v.any():
            continue
        q = p[v]
        tol = 1e-9
        if (q[:, 0] < box[0] - tol).any() or (q[:, 0] > box[2] + tol).any() \
                or (q[:, 1] < box[1] - tol).any() or (q[:, 1] > box[3] + tol).any():
            raise ValueError(f"box of frame {t} does not cover its visible landmarks")
    cx, cy, side = tube_from_boxes(boxes)
    x0, y0 = cx - side / 2, cy - side / 2

    v_idx, u_idx = np.mgrid[0:out_h, 0:out_w].astype(np.float64)
    src_x = x0 + u_idx * side / (out_w - 1)
    src_y = y0 + v_idx * side / (out_h - 1)
    frames = np.empty((len(clip), out_h, out_w, 3), dtype=np.float32)
    for t, frame in enumerate(clip.frames):
        for ch in range(3):
            frames[t, :, :, ch] = ndimage.map_coordinates(
                frame[:, :, ch], [src_y, src_x], order=1, mode="nearest")
    frames = np.clip(frames, -1.0, 1.0)
    coords = np.stack([(pix[..., 0] - x0) / side * 2 - 1,
                       (pix[..., 1] - y0) / side * 2 - 1], -1)
    inside = np.all(np.abs(coords) <= 1.0 + 1e-12, axis=-1)
    coords = np.where(inside[..., None], np.clip(coords, -1, 1), coords)
    return VideoClip(frames, coords, clip.visible & inside, clip.clip_id, clip.action_label)


def tube_to_pixels(coords, tube: tuple[float, float, float]) -> np.ndarray:
    """Map tube-normalised coordinates back to original pixel positions."""
    cx, cy, side = tube
    coords = np.asarray(coords, dtype=np.float64)
    return np.stack([cx + coords[..., 0] * side / 2, cy + coords[..., 1] * side / 2], -1)


def hflip(clip: VideoClip, swap: SwapMap) -> VideoClip:
    perm = swap.permutation(clip.n_landmarks)
    frames = clip.frames[:, :, ::-1, :].copy()
    coords = clip.coords[:, perm].copy()
    coords[..., 0] *= -1
    return VideoClip(frames, coords, clip.visible[:, perm].copy(), clip.clip_id,
                     clip.action_label)


def hflip_augment(clip: VideoClip, swap: SwapMap, seed) -> VideoClip:
    """Mirror the clip with probability 0.5, exchanging paired landmark indices."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return hflip(clip, swap) if rng.random() < 0.5 else clip


def hflip_pose(pose: PoseFrame, swap: SwapMap) -> PoseFrame:
    perm = swap.permutation(pose.n_landmarks)
    coords = pose.coords[perm].copy()
    coords[:, 0] *= -1
    return PoseFrame(coords, pose.visible[perm])


def iter_windows(clips: Sequence[VideoClip], length: int) -> Iterable[tuple[int, int]]:
    for ci, clip in enumerate(clips):
        for s in range(len(clip) - length + 1):
            yield ci, s
