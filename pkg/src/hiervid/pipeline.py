"""End-to-end video prediction: estimate observed poses, forecast, then generate.

Every future frame is generated from the last observed frame alone; predicted
frames are never fed back into any model.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch
from PIL import Image

from .checkpoint import load_checkpoint, save_checkpoint  # noqa: F401  (re-exported)
from .dataset import PoseFrame, VideoClip, to_uint8, write_pose_records
from .generator import AnalogyGenerator, analogy
from .heatmap import render_heatmaps_batch
from .nets import frames_to_tensor, tensor_to_frames
from .pose_predictor import PosePredictor, predict_sequence


class EstimatorError(RuntimeError):
    pass


class PoseEstimator(Protocol):
    def __call__(self, frame: np.ndarray, t: int) -> PoseFrame: ...


class OracleEstimator:
    """Returns the clip's stored pose for observed frame ``t`` (0-based)."""

    def __init__(self, clip: VideoClip):
        self.clip = clip

    def __call__(self, frame, t: int) -> PoseFrame:
        if not 0 <= t < len(self.clip):
            raise EstimatorError(f"no stored pose for frame {t}")
        return self.clip.pose(t)


class _ReadLog(Sequence):
    """Read-only view over the observed frames that records every index accessed."""

    def __init__(self, frames):
        self._frames = frames
        self.reads: list[int] = []

    def __len__(self):
        return len(self._frames)

    def __getitem__(self, i):
        if isinstance(i, slice):
            raise TypeError("observed frames are read one at a time")
        i = range(len(self._frames))[i]
        self.reads.append(i)
        return self._frames[i]


@dataclass
class PredictionResult:
    observed_poses: list
    predicted_poses: list
    predicted_frames: np.ndarray
    provenance: dict = field(default_factory=dict)


def _heatmap(pose: PoseFrame, gen: AnalogyGenerator) -> torch.Tensor:
    size = (gen.image_size, gen.image_size)
    return torch.as_tensor(render_heatmaps_batch(pose.coords[None], pose.visible[None],
                                                 gen.sigma, size), dtype=gen.dtype)


@torch.no_grad()
def generate_frames(x_k, p_k: PoseFrame, future: Sequence[PoseFrame],
                    gen: AnalogyGenerator, stats: dict | None = None) -> np.ndarray:
    """Decode one frame per future pose from a single encoding of ``x_k``."""
    size = gen.image_size
    if len(future) == 0:
        return np.zeros((0, size, size, 3), dtype=np.float32)
    img_feat = gen.encode_image(frames_to_tensor(x_k, gen.dtype))
    if stats is not None:
        stats["image_encoder_calls"] = stats.get("image_encoder_calls", 0) + 1
    pose_feat = gen.encode_pose(_heatmap(p_k, gen))
    out = []
    for p in future:
        z = analogy(gen.encode_pose(_heatmap(p, gen)), pose_feat, img_feat)
        out.append(tensor_to_frames(gen.decode(z))[0])
    return np.stack(out)


def predict_video(observed_frames, horizon: int, estimator: PoseEstimator,
                  pose_model: PosePredictor, gen: AnalogyGenerator) -> PredictionResult:
    if pose_model is None or gen is None:
        raise ValueError("both the pose model and the generator must be loaded")
    frames = _ReadLog(observed_frames)
    k = len(frames)
    if k < 1:
        raise ValueError("need at least one observed frame")
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    observed = []
    for t in range(k):
        try:
            observed.append(estimator(frames[t], t))
        except EstimatorError:
            raise
        except Exception as exc:
            raise EstimatorError(f"pose estimation failed on frame {t}: {exc}") from exc
    estimator_reads = list(frames.reads)

    stats = {"image_encoder_calls": 0}
    predicted_poses = predict_sequence(observed, horizon, pose_model) if horizon else []
    if horizon:
        predicted = generate_frames(frames[k - 1], observed[-1], predicted_poses, gen, stats)
    else:
        predicted = np.zeros((0, gen.image_size, gen.image_size, 3), dtype=np.float32)
    provenance = {
        "k": k,
        "estimator_reads": estimator_reads,
        "generator_reads": frames.reads[len(estimator_reads):],
        "image_encoder_calls": stats["image_encoder_calls"],
        # only observed frames are reachable through the log; anything else would be feedback
        "predicted_frames_read": sum(1 for i in frames.reads if i >= k),
    }
    return PredictionResult(observed, predicted_poses, predicted, provenance)


def save_prediction(result: PredictionResult, clip_dir) -> Path:
    """Write ``<clip_dir>/pred/frames/%06d.png`` and ``<clip_dir>/pred/pose.jsonl``."""
    pred = Path(clip_dir) / "pred"
    (pred / "frames").mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(to_uint8(result.predicted_frames)):
        Image.fromarray(frame, mode="RGB").save(pred / "frames" / f"{t:06d}.png")
    if result.predicted_poses:
        coords = np.stack([p.coords for p in result.predicted_poses])
        visible = np.stack([p.visible for p in result.predicted_poses])
    else:
        coords, visible = np.zeros((0, 0, 2)), np.zeros((0, 0), bool)
    write_pose_records(coords, visible, pred / "pose.jsonl")
    return pred
