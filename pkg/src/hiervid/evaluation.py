"""PSNR evaluation stratified by motion decile, baselines and oracle variants."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .dataset import PoseFrame, VideoClip
from .generator import AnalogyGenerator
from .heatmap import composite_background, foreground_mask, render_heatmaps
from .pipeline import OracleEstimator, generate_frames, predict_video
from .pose_predictor import PosePredictor, pose_loss

log = logging.getLogger(__name__)

PSNR_CAP = 60.0
VARIANTS = ("ours", "ours_bg", "ours_gt_pose", "ours_gt_pose_bg", "copy_last", "flow_warp")


def psnr(x, x_hat) -> float:
    """PSNR in dB of two [-1, 1] images after mapping both to [0, 1]; capped at 60 dB."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    mse = np.mean(((x - x_hat) / 2.0) ** 2)
    if mse < 1e-6:
        return PSNR_CAP
    return float(min(PSNR_CAP, max(0.0, 10.0 * np.log10(1.0 / mse))))


# -- motion stratification ------------------------------------------------------------

def motion_score(frames) -> float:
    """Mean over consecutive frame pairs of the mean absolute pixel difference ([0, 1] units)."""
    frames = np.asarray(frames, dtype=np.float64)
    if len(frames) < 2:
        return 0.0
    return float(np.mean(np.abs(np.diff(frames, axis=0)).reshape(len(frames) - 1, -1).mean(1)) / 2)


def assign_deciles(scores: dict) -> dict:
    """Rank ascending and split into 10 near-equal bins; extra clips go to the lowest bins."""
    if len(scores) < 10:
        raise ValueError(f"need at least 10 clips for motion deciles, got {len(scores)}")
    order = sorted(scores, key=lambda cid: (scores[cid], cid))
    base, extra = divmod(len(order), 10)
    out = {}
    start = 0
    for d in range(10):
        size = base + (1 if d < extra else 0)
        for cid in order[start:start + size]:
            out[cid] = d + 1
        start += size
    return out


def motion_deciles(test_clips: Sequence[VideoClip]) -> dict:
    return assign_deciles({c.clip_id: motion_score(c.frames) for c in test_clips})


# -- baselines -----------------------------------------------------------------------

def copy_last_frame_baseline(x_k, horizon: int) -> np.ndarray:
    x_k = np.asarray(x_k)
    return np.repeat(x_k[None], horizon, axis=0)


def estimate_flow(prev, cur, radius: int = 4, block: int = 8) -> np.ndarray:
    """Block-matching flow from ``prev`` to ``cur``: (H, W, 2) per-pixel (dx, dy) in pixels.

    Each block of ``cur`` takes the displacement d minimising the SAD between
    cur(q) and prev(q - d); ties go to the shortest displacement.
    """
    if radius < 1:
        raise ValueError("radius must be at least 1")
    prev = np.asarray(prev, dtype=np.float64)
    cur = np.asarray(cur, dtype=np.float64)
    if prev.shape != cur.shape:
        raise ValueError("frames must have the same shape")
    if prev.ndim == 2:
        prev, cur = prev[..., None], cur[..., None]
    h, w = cur.shape[:2]
    bh, bw = -(-h // block), -(-w // block)
    padded = np.pad(prev, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    cur_p = np.pad(cur, ((0, bh * block - h), (0, bw * block - w), (0, 0)), mode="edge")
    shifts = sorted(((dx, dy) for dy in range(-radius, radius + 1)
                     for dx in range(-radius, radius + 1)),
                    key=lambda d: (d[0] ** 2 + d[1] ** 2, d[1], d[0]))
    costs = np.empty((len(shifts), bh, bw))
    for i, (dx, dy) in enumerate(shifts):
        moved = padded[radius - dy:radius - dy + h, radius - dx:radius - dx + w]
        moved = np.pad(moved, ((0, bh * block - h), (0, bw * block - w), (0, 0)), mode="edge")
        sad = np.abs(cur_p - moved).sum(-1)
        costs[i] = sad.reshape(bh, block, bw, block).sum((1, 3))
    best = np.argmin(costs, axis=0)
    vec = np.asarray(shifts, dtype=np.float64)[best]  # (bh, bw, 2)
    flow = np.repeat(np.repeat(vec, block, 0), block, 1)[:h, :w]
    return flow


def flow_warp_baseline(x_k, flow, horizon: int) -> np.ndarray:
    """Forward-splat ``x_k`` by n * flow for n = 1..horizon; holes keep ``x_k``'s pixels."""
    x_k = np.asarray(x_k, dtype=np.float64)
    h, w = x_k.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    out = []
    for n in range(1, horizon + 1):
        tx = np.rint(xx + n * flow[..., 0]).astype(int)
        ty = np.rint(yy + n * flow[..., 1]).astype(int)
        ok = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
        acc = np.zeros_like(x_k)
        cnt = np.zeros((h, w))
        np.add.at(acc, (ty[ok], tx[ok]), x_k[ok])
        np.add.at(cnt, (ty[ok], tx[ok]), 1)
        frame = x_k.copy()
        hit = cnt > 0
        frame[hit] = acc[hit] / cnt[hit][:, None]
        out.append(frame)
    if not out:
        return np.zeros((0,) + x_k.shape)
    return np.stack(out).astype(np.float32)


# -- variants ------------------------------------------------------------------------

@dataclass
class EvalRecord:
    clip_id: str
    variant: str
    per_step_psnr: list
    motion_score: float
    decile: int
    pose_mse: float

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.per_step_psnr))


@dataclass
class EvalConfig:
    k: int = 10
    T: int = 16
    mask_sigma: float = 5.0
    mask_threshold: float = 0.3
    mask_dilate: int = 2
    flow_radius: int = 4
    flow_block: int = 8


def bg_masks(p_k: PoseFrame, future: Sequence[PoseFrame], size: int, config: EvalConfig):
    """Foreground where either the last observed or the target pose has heatmap support."""
    res = (size, size)
    base = foreground_mask(render_heatmaps(p_k, config.mask_sigma, res),
                           config.mask_threshold, config.mask_dilate)
    return [base | foreground_mask(render_heatmaps(p, config.mask_sigma, res),
                                   config.mask_threshold, config.mask_dilate)
            for p in future]


def _psnrs(pred, target):
    return [psnr(t, p) for p, t in zip(pred, target)]


def evaluate_clip(clip: VideoClip, pose_model: PosePredictor, gen: AnalogyGenerator,
                  config: EvalConfig, decile: int, score: float) -> list[EvalRecord]:
    k, T = config.k, config.T
    if len(clip) < k + T:
        raise ValueError(f"{clip.clip_id}: needs {k + T} frames, has {len(clip)}")
    target = clip.frames[k:k + T]
    gt_future = [clip.pose(t) for t in range(k, k + T)]
    result = predict_video(clip.frames[:k], T, OracleEstimator(clip), pose_model, gen)
    p_k = result.observed_poses[-1]
    x_k = clip.frames[k - 1]
    size = gen.image_size
    pose_mse = pose_loss(result.predicted_poses, gt_future)

    frames = {"ours": result.predicted_frames,
              "ours_gt_pose": generate_frames(x_k, p_k, gt_future, gen)}
    masks = bg_masks(p_k, result.predicted_poses, size, config)
    frames["ours_bg"] = np.stack([composite_background(f, x_k, m)
                                  for f, m in zip(frames["ours"], masks)])
    masks = bg_masks(p_k, gt_future, size, config)
    frames["ours_gt_pose_bg"] = np.stack([composite_background(f, x_k, m)
                                          for f, m in zip(frames["ours_gt_pose"], masks)])
    frames["copy_last"] = copy_last_frame_baseline(x_k, T)
    flow = estimate_flow(clip.frames[k - 2] if k >= 2 else x_k, x_k,
                         config.flow_radius, config.flow_block)
    frames["flow_warp"] = flow_warp_baseline(x_k, flow, T)
    return [EvalRecord(clip.clip_id, v, _psnrs(frames[v], target), score, decile, pose_mse)
            for v in VARIANTS]


def evaluate_variants(test_clips: Sequence[VideoClip], pose_model: PosePredictor,
                      gen: AnalogyGenerator, config: EvalConfig) -> list[EvalRecord]:
    scores = {c.clip_id: motion_score(c.frames) for c in test_clips}
    deciles = assign_deciles(scores)
    records = []
    for clip in test_clips:
        if len(clip) < config.k + config.T or not np.isfinite(clip.coords).all():
            raise ValueError(f"{clip.clip_id}: missing ground truth for oracle variants")
        records += evaluate_clip(clip, pose_model, gen, config, deciles[clip.clip_id],
                                 scores[clip.clip_id])
    return records


# -- analysis ------------------------------------------------------------------------

def pose_psnr_correlation(records: Sequence[EvalRecord], variant: str = "ours"):
    """Spearman correlation of pose MSE vs mean PSNR, plus per-decile means."""
    rows = [r for r in records if r.variant == variant]
    if len(rows) < 3:
        raise ValueError(f"need at least 3 {variant!r} records, got {len(rows)}")
    mse = np.array([r.pose_mse for r in rows])
    mean_psnr = np.array([r.mean_psnr for r in rows])
    rho = float(stats.spearmanr(mse, mean_psnr).statistic)
    table = {}
    for d in sorted({r.decile for r in rows}):
        sel = [r for r in rows if r.decile == d]
        table[d] = {"pose_mse": float(np.mean([r.pose_mse for r in sel])),
                    "psnr": float(np.mean([r.mean_psnr for r in sel])), "n": len(sel)}
    return rho, table


def paired_sign_test(better: Sequence[float], worse: Sequence[float]) -> tuple[float, float]:
    """Mean paired difference and one-sided sign-test p-value (ties dropped)."""
    diff = np.asarray(better, dtype=np.float64) - np.asarray(worse, dtype=np.float64)
    wins, losses = int((diff > 0).sum()), int((diff < 0).sum())
    if wins + losses == 0:
        return float(diff.mean()), 1.0
    p = stats.binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue
    return float(diff.mean()), float(p)


def mean_psnr_by_variant(records: Sequence[EvalRecord]) -> dict:
    out = {}
    for v in VARIANTS:
        sel = [r.mean_psnr for r in records if r.variant == v]
        if sel:
            out[v] = float(np.mean(sel))
    return out


# -- report --------------------------------------------------------------------------

def write_records(records: Sequence[EvalRecord], path) -> Path:
    if not records:
        raise ValueError("no records to write")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    horizon = max(len(r.per_step_psnr) for r in records)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clip_id", "variant", "decile", "motion_score", "pose_mse"]
                   + [f"psnr_step_{i + 1}" for i in range(horizon)])
        for r in records:
            w.writerow([r.clip_id, r.variant, r.decile, repr(float(r.motion_score)),
                        repr(float(r.pose_mse))] + [repr(float(v)) for v in r.per_step_psnr])
    return path


def read_records(path) -> list[EvalRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            steps = sorted((k for k in row if k.startswith("psnr_step_")),
                           key=lambda k: int(k.rsplit("_", 1)[1]))
            out.append(EvalRecord(row["clip_id"], row["variant"],
                                  [float(row[k]) for k in steps if row[k] != ""],
                                  float(row["motion_score"]), int(row["decile"]),
                                  float(row["pose_mse"])))
    return out


def report(records: Sequence[EvalRecord], out_dir, plot: bool = False) -> list[Path]:
    """Write records.csv and one psnr_decile_<d>.csv (step x variant means) per decile."""
    if not records:
        raise ValueError("no records to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = [write_records(records, out_dir / "records.csv")]
    variants = [v for v in VARIANTS if any(r.variant == v for r in records)]
    variants += sorted({r.variant for r in records} - set(variants))
    horizon = max(len(r.per_step_psnr) for r in records)
    for d in sorted({r.decile for r in records}):
        path = out_dir / f"psnr_decile_{d}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step"] + variants)
            for step in range(horizon):
                row = [step + 1]
                for v in variants:
                    vals = [r.per_step_psnr[step] for r in records
                            if r.decile == d and r.variant == v and len(r.per_step_psnr) > step]
                    row.append(repr(float(np.mean(vals))) if vals else "")
                w.writerow(row)
        written.append(path)
    if plot:
        written += _plot_curves(records, variants, horizon, out_dir)
    return written


def _plot_curves(records, variants, horizon, out_dir) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    paths = []
    for d in sorted({r.decile for r in records}):
        fig, ax = plt.subplots(figsize=(4, 3))
        for v in variants:
            rows = np.array([r.per_step_psnr for r in records if r.decile == d and r.variant == v])
            if len(rows):
                ax.plot(np.arange(1, horizon + 1), rows.mean(0), label=v)
        ax.set_xlabel("time step")
        ax.set_ylabel("PSNR (dB)")
        ax.set_title(f"motion decile {d}")
        ax.legend(fontsize=6)
        fig.tight_layout()
        path = out_dir / f"psnr_decile_{d}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths
