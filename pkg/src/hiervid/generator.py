"""Visual-structure analogy generator.

A future frame is decoded from ``f_pose(g(p_future)) - f_pose(g(p_t)) + f_img(x_t)``:
the change between two pose encodings is applied to the features of the
observed frame. With skips enabled the same arithmetic is applied at every
encoder resolution and the decoder consumes the whole feature tuple.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .dataset import PoseFrame, SwapMap, VideoClip
from .heatmap import DEFAULT_SIGMA, render_heatmaps_batch
from .losses import (Discriminator, PerceptualExtractors, discriminator_loss,
                     generator_loss_terms)
from .nets import ConvDecoder, ConvEncoder, frames_to_tensor, tensor_to_frames
from .pose_predictor import TrainingDivergedError

log = logging.getLogger(__name__)


class AnalogyGenerator(nn.Module):
    def __init__(self, n_landmarks: int, widths=(16, 32, 64), act: str | None = "relu",
                 image_size: int = 64, sigma: float = DEFAULT_SIGMA, skips: bool = True):
        super().__init__()
        self.f_img = ConvEncoder(3, widths, act, skips)
        self.f_pose = ConvEncoder(n_landmarks, widths, act, skips)
        self.f_dec = ConvDecoder(widths, 3, act, skips)
        self.skips = skips
        self.n_landmarks = n_landmarks
        self.widths = tuple(widths)
        self.act = act
        self.image_size = image_size
        self.sigma = sigma

    def arch(self) -> dict:
        return {"n_landmarks": self.n_landmarks, "widths": list(self.widths), "act": self.act,
                "image_size": self.image_size, "sigma": self.sigma, "skips": self.skips}

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def encode_image(self, x):
        return self.f_img(x)

    def encode_pose(self, hm):
        return self.f_pose(hm)

    def decode(self, z):
        return self.f_dec(z)

    def bottleneck(self, x, hm_t, hm_future):
        return analogy(self.encode_pose(hm_future), self.encode_pose(hm_t), self.encode_image(x))

    def forward(self, x, hm_t, hm_future):
        return self.decode(self.bottleneck(x, hm_t, hm_future))

    def heatmaps(self, coords, visible) -> torch.Tensor:
        """(B, L, 2) coords -> (B, L, S, S) heatmap tensor at the generator's resolution."""
        size = (self.image_size, self.image_size)
        return torch.as_tensor(render_heatmaps_batch(coords, visible, self.sigma, size),
                               dtype=self.dtype)


def analogy(pose_future, pose_t, img):
    """``pose_future - pose_t + img`` on tensors or, elementwise, on feature tuples."""
    if isinstance(img, torch.Tensor):
        return pose_future - pose_t + img
    return tuple(a - b + c for a, b, c in zip(pose_future, pose_t, img))


def build_generator(n_landmarks: int, widths=(16, 32, 64), act="relu", image_size=64,
                    sigma=DEFAULT_SIGMA, seed: int = 0, dtype=torch.float32,
                    skips: bool = True) -> AnalogyGenerator:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        gen = AnalogyGenerator(n_landmarks, widths, act, image_size, sigma, skips)
    return gen.to(dtype)


def build_discriminator(n_landmarks: int, widths=(16, 32, 64, 64), image_size=64, seed: int = 0,
                        dtype=torch.float32) -> Discriminator:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        disc = Discriminator(n_landmarks, widths, image_size)
    return disc.to(dtype)


# -- array-level API --------------------------------------------------------------

def _check_frame(x, gen):
    x = np.asarray(x)
    if x.shape != (gen.image_size, gen.image_size, 3):
        raise ValueError(f"expected a {gen.image_size}x{gen.image_size}x3 frame, got {x.shape}")
    return x


def _unbatch(feat):
    if isinstance(feat, torch.Tensor):
        return feat[0].numpy()
    return tuple(f[0].numpy() for f in feat)


@torch.no_grad()
def encode_image(x, gen: AnalogyGenerator):
    """Feature map of one frame (a tuple of maps, finest first, when skips are on)."""
    return _unbatch(gen.encode_image(frames_to_tensor(_check_frame(x, gen), gen.dtype)))


@torch.no_grad()
def encode_pose(hm, gen: AnalogyGenerator):
    hm = np.asarray(hm)
    if hm.shape[0] != gen.n_landmarks:
        raise ValueError(f"expected {gen.n_landmarks} heatmap channels, got {hm.shape[0]}")
    return _unbatch(gen.encode_pose(torch.as_tensor(hm[None], dtype=gen.dtype)))


@torch.no_grad()
def analogy_generate(x_t, p_t: PoseFrame, p_future: PoseFrame, gen: AnalogyGenerator,
                     sigma: float | None = None) -> np.ndarray:
    """Generate the frame showing ``x_t``'s appearance in pose ``p_future``."""
    x = frames_to_tensor(_check_frame(x_t, gen), gen.dtype)
    if p_t.n_landmarks != gen.n_landmarks or p_future.n_landmarks != gen.n_landmarks:
        raise ValueError("pose landmark count does not match the generator")
    size = (gen.image_size, gen.image_size)
    s = gen.sigma if sigma is None else sigma
    hm_t = torch.as_tensor(render_heatmaps_batch(p_t.coords[None], p_t.visible[None], s, size),
                           dtype=gen.dtype)
    hm_f = torch.as_tensor(render_heatmaps_batch(p_future.coords[None], p_future.visible[None],
                                                 s, size), dtype=gen.dtype)
    z = gen.bottleneck(x, hm_t, hm_f)
    return tensor_to_frames(gen.decode(z))[0]


# -- training pairs ---------------------------------------------------------------

def sample_training_pair(clip: VideoClip, max_jump: int, seed):
    """Draw (x_t, p_t, x_{t+n}, p_{t+n}, n) with n uniform on [1, min(max_jump, len-1)]."""
    if len(clip) < 2:
        raise ValueError(f"clip {clip.clip_id} too short for a training pair")
    if max_jump < 1:
        raise ValueError("max_jump must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = int(rng.integers(1, min(max_jump, len(clip) - 1) + 1))
    t = int(rng.integers(0, len(clip) - n))
    return clip.frames[t], clip.pose(t), clip.frames[t + n], clip.pose(t + n), n


class PairSampler:
    """Batched jump-in-time sampling over a fixed set of clips, with optional flips."""

    def __init__(self, clips: Sequence[VideoClip], max_jump: int, swap: SwapMap | None = None,
                 flip_prob: float = 0.5):
        lengths = {len(c) for c in clips}
        if len(lengths) != 1:
            raise ValueError("PairSampler expects clips of equal length")
        self.length = lengths.pop()
        if self.length < 2:
            raise ValueError("clips too short for training pairs")
        self.pixels = np.stack([np.clip(np.rint((c.frames + 1) * 127.5), 0, 255).astype(np.uint8)
                                for c in clips])
        self.coords = np.stack([c.coords for c in clips])
        self.visible = np.stack([c.visible for c in clips])
        self.max_jump = min(max_jump, self.length - 1)
        self.perm = swap.permutation(self.coords.shape[2]) if swap is not None else None
        self.flip_prob = flip_prob if swap is not None else 0.0

    def sample(self, batch: int, rng: np.random.Generator):
        ci = rng.integers(len(self.pixels), size=batch)
        n = rng.integers(1, self.max_jump + 1, size=batch)
        t = (rng.random(batch) * (self.length - n)).astype(int)
        flip = rng.random(batch) < self.flip_prob
        out = []
        for ti in (t, t + n):
            x = self.pixels[ci, ti].astype(np.float32) / 127.5 - 1.0
            c = self.coords[ci, ti].copy()
            v = self.visible[ci, ti].copy()
            if flip.any():
                x[flip] = x[flip][:, :, ::-1]
                c[flip] = c[flip][:, self.perm]
                c[flip, :, 0] *= -1
                v[flip] = v[flip][:, self.perm]
            out.append((x, c, v))
        return out, n


# -- training ---------------------------------------------------------------------

@dataclass
class GenTrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr_g: float = 1e-3
    lr_d: float = 2e-4
    beta1: float = 0.5
    max_jump: int = 16
    w_img: float = 1.0
    # the terms are means, so these restore roughly the balance of summed norms:
    # extractor features are ~1/6 the size of an image, the adversarial term is per image
    w_feat: float = 0.15
    w_gen: float = 0.001
    flip_prob: float = 0.5
    log_every: int = 100


def train_generator(clips: Sequence[VideoClip], gen: AnalogyGenerator, disc: Discriminator,
                    extractors: PerceptualExtractors, config: GenTrainConfig, seed: int = 0,
                    swap: SwapMap | None = None):
    """Alternate one discriminator step and one generator step per batch.

    Returns ``(gen, disc, curves)`` where ``curves`` maps each loss name to its
    per-step values.
    """
    sampler = PairSampler(clips, config.max_jump, swap, config.flip_prob)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(3)[2])
    opt_g = torch.optim.Adam(gen.parameters(), lr=config.lr_g, betas=(config.beta1, 0.999))
    opt_d = torch.optim.Adam(disc.parameters(), lr=config.lr_d, betas=(config.beta1, 0.999))
    weights = (config.w_img, config.w_feat, config.w_gen)
    dtype = gen.dtype
    curves = {"img": [], "feat": [], "gen": [], "disc": []}
    fmt = torch.channels_last
    for m in (gen, disc, extractors):
        m.to(memory_format=fmt)
    gen.train()
    disc.train()
    for step in range(config.steps):
        ((x0, c0, v0), (x1, c1, v1)), _ = sampler.sample(config.batch_size, rng)
        x_t = frames_to_tensor(x0, dtype).contiguous(memory_format=fmt)
        x_tn = frames_to_tensor(x1, dtype).contiguous(memory_format=fmt)
        hm_t = gen.heatmaps(c0, v0).contiguous(memory_format=fmt)
        hm_tn = gen.heatmaps(c1, v1).contiguous(memory_format=fmt)
        x_hat = gen(x_t, hm_t, hm_tn)

        d_loss = discriminator_loss(hm_tn, x_tn, x_hat.detach(), x_t, disc)
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        disc.requires_grad_(False)
        terms = generator_loss_terms(x_tn, x_hat, hm_tn, extractors, disc)
        g_loss = sum(w * terms[k] for w, k in zip(weights, ("img", "feat", "gen")))
        disc.requires_grad_(True)
        values = {k: v.item() for k, v in terms.items()}
        values["disc"] = d_loss.item()
        for v in values.values():
            if not np.isfinite(v):
                raise TrainingDivergedError(step, v)
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()
        for k, v in values.items():
            curves[k].append(v)
        if config.log_every and step % config.log_every == 0:
            log.info("gen step %d img %.4f feat %.4f gen %.3f disc %.3f", step,
                     values["img"], values["feat"], values["gen"], values["disc"])
    for m in (gen, disc, extractors):
        m.to(memory_format=torch.contiguous_format)
    gen.eval()
    disc.eval()
    return gen, disc, curves
