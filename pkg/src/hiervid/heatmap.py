"""Gaussian landmark heatmaps and the foreground masks derived from them."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .dataset import PoseFrame, to_pixels

DEFAULT_SIGMA = 1.5


def render_heatmaps(pose: PoseFrame, sigma: float = DEFAULT_SIGMA,
                    resolution: tuple[int, int] = (64, 64)) -> np.ndarray:
    """Render an (L, H', W') stack of unnormalised Gaussians, peak 1 at each landmark.

    Invisible landmarks give all-zero channels.
    """
    return render_heatmaps_batch(pose.coords[None], pose.visible[None], sigma, resolution)[0]


def render_heatmaps_batch(coords, visible, sigma: float = DEFAULT_SIGMA,
                          resolution: tuple[int, int] = (64, 64),
                          dtype=np.float64) -> np.ndarray:
    """Vectorised ``render_heatmaps`` over a leading batch axis: (B, L, 2) -> (B, L, H', W')."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    h, w = resolution
    if h <= 0 or w <= 0:
        raise ValueError("resolution must be positive")
    coords = np.asarray(coords, dtype=np.float64)
    visible = np.asarray(visible, dtype=bool)
    pix = to_pixels(coords, w, h)
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    # separable: exp(-(dx^2 + dy^2) / 2s^2) = exp(-dx^2/2s^2) * exp(-dy^2/2s^2)
    gx = np.exp(-((xs - pix[..., 0:1]) ** 2) / (2 * sigma ** 2))
    gy = np.exp(-((ys - pix[..., 1:2]) ** 2) / (2 * sigma ** 2))
    maps = gy[..., :, None] * gx[..., None, :]
    maps *= visible[..., None, None]
    return maps.astype(dtype, copy=False)


def foreground_mask(stack: np.ndarray, threshold: float = 0.3, dilate: int = 2) -> np.ndarray:
    if not 0 < threshold < 1:
        raise ValueError("threshold must lie in (0, 1)")
    stack = np.asarray(stack)
    if stack.shape[0] == 0:
        return np.zeros(stack.shape[1:], dtype=bool)
    mask = stack.max(axis=0) >= threshold
    if dilate > 0 and mask.any():
        mask = ndimage.binary_dilation(mask, structure=np.ones((3, 3), bool), iterations=dilate)
    return mask


def composite_background(pred: np.ndarray, last_obs: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Keep ``pred`` on foreground pixels and ``last_obs`` everywhere else."""
    pred = np.asarray(pred)
    last_obs = np.asarray(last_obs)
    mask = np.asarray(mask, dtype=bool)
    if pred.shape != last_obs.shape or pred.shape[:2] != mask.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, last_obs {last_obs.shape}, "
                         f"mask {mask.shape}")
    return np.where(mask[..., None], pred, last_obs)


def save_debug_png(stack: np.ndarray, path) -> None:
    """Dump a heatmap stack as a multi-page (APNG) file, one page per landmark."""
    from PIL import Image
    pages = [Image.fromarray(np.clip(np.rint(c * 255), 0, 255).astype(np.uint8), mode="L")
             for c in np.asarray(stack)]
    pages[0].save(path, save_all=True, append_images=pages[1:], format="PNG")
