"""Training objective of the analogy generator and its conditional discriminator.

Losses take NCHW tensors (arrays are converted as-is) and average over the batch.
"""
from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .nets import ConvDecoder, ConvEncoder, activation

log = logging.getLogger(__name__)

EPS = 1e-6


def _t(x):
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x))


def _check_same(a, b, what="inputs"):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch between {what}: {tuple(a.shape)} vs {tuple(b.shape)}")


def safe_log(p, eps: float = EPS):
    return torch.log(torch.clamp(p, min=eps))


class Discriminator(nn.Module):
    """Strided conv classifier over depth-concatenated [heatmaps, image]; outputs P(real)."""

    def __init__(self, n_landmarks: int, widths=(16, 32, 64, 64), image_size: int = 64,
                 act: str | None = "lrelu"):
        super().__init__()
        final = image_size // 2 ** len(widths)
        if final < 1 or image_size % 2 ** len(widths):
            raise ValueError(f"image size {image_size} not divisible by 2**{len(widths)}")
        layers = []
        c = n_landmarks + 3
        for w in widths:
            layers += [nn.Conv2d(c, w, 4, stride=2, padding=1), activation(act)]
            c = w
        layers.append(nn.Conv2d(c, 1, final))
        self.net = nn.Sequential(*layers)
        self.n_landmarks = n_landmarks
        self.widths = tuple(widths)
        self.image_size = image_size
        self.act = act

    def arch(self) -> dict:
        return {"n_landmarks": self.n_landmarks, "widths": list(self.widths),
                "image_size": self.image_size, "act": self.act}

    def logits(self, heatmaps, images):
        return self.net(torch.cat([heatmaps, images], 1)).flatten()

    def forward(self, heatmaps, images):
        return torch.sigmoid(self.logits(heatmaps, images))


class PerceptualExtractors(nn.Module):
    """Frozen feature maps: ``c1`` responds mostly to appearance, ``c2`` to structure."""

    def __init__(self, c1: nn.Module, c2: nn.Module, spec: dict | None = None):
        super().__init__()
        self.c1 = c1
        self.c2 = c2
        self.spec = spec or {}
        self.requires_grad_(False)
        self.eval()

    def arch(self) -> dict:
        return dict(self.spec)

    def train(self, mode: bool = True):
        # extractors stay in eval mode even inside a training loop
        return super().train(False)


# -- losses ---------------------------------------------------------------------

def image_loss(x, x_hat):
    x, x_hat = _t(x), _t(x_hat)
    _check_same(x, x_hat, "target and generated images")
    return ((x - x_hat) ** 2).mean()


def feature_loss(x, x_hat, extractors):
    x, x_hat = _t(x), _t(x_hat)
    total = 0.0
    for extractor in (extractors.c1, extractors.c2):
        a, b = extractor(x), extractor(x_hat)
        _check_same(a, b, "extractor outputs")
        total = total + ((a - b) ** 2).mean()
    return total


def generator_adv_loss(p_cond, x_hat, disc, eps: float = EPS):
    return -safe_log(disc(_t(p_cond), _t(x_hat)), eps).mean()


def discriminator_loss(p_cond, x_real, x_fake, x_input, disc, eps: float = EPS):
    """Real pair, generated pair, and the mismatched (input frame, future pose) pair."""
    p_cond, x_real, x_fake, x_input = map(_t, (p_cond, x_real, x_fake, x_input))
    _check_same(x_real, x_fake, "real and generated images")
    _check_same(x_real, x_input, "real and input images")
    real = disc(p_cond, x_real)
    fake = disc(p_cond, x_fake)
    mismatch = disc(p_cond, x_input)
    return (-safe_log(real, eps) - 0.5 * safe_log(1 - fake, eps)
            - 0.5 * safe_log(1 - mismatch, eps)).mean()


def generator_loss_terms(x, x_hat, p_cond, extractors, disc, eps: float = EPS) -> dict:
    return {"img": image_loss(x, x_hat),
            "feat": feature_loss(x, x_hat, extractors),
            "gen": generator_adv_loss(p_cond, x_hat, disc, eps)}


def total_generator_loss(x, x_hat, p_cond, extractors, disc, weights=(1.0, 1.0, 1.0),
                         eps: float = EPS):
    terms = generator_loss_terms(x, x_hat, p_cond, extractors, disc, eps)
    w_img, w_feat, w_gen = weights
    return w_img * terms["img"] + w_feat * terms["feat"] + w_gen * terms["gen"]


# -- extractor pretraining ---------------------------------------------------------

class HeatmapRegressor(nn.Module):
    def __init__(self, n_landmarks: int, widths=(16, 32)):
        super().__init__()
        self.encoder = ConvEncoder(3, widths)
        self.head = nn.Conv2d(widths[-1], n_landmarks, 1)
        self.factor = self.encoder.factor

    def forward(self, x):
        return self.head(torch.relu(self.encoder(x)))


def build_extractors(n_landmarks: int, c1_widths=(16, 32, 32), c2_widths=(16, 32)):
    """Untrained extractor pair with the layout produced by the two training functions."""
    spec = {"n_landmarks": n_landmarks, "c1_widths": list(c1_widths),
            "c2_widths": list(c2_widths)}
    return PerceptualExtractors(ConvEncoder(3, tuple(c1_widths)),
                                HeatmapRegressor(n_landmarks, tuple(c2_widths)), spec)


def _seeded(seed, fn, *args, **kwargs):
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return fn(*args, **kwargs)


def train_appearance_extractor(frames: torch.Tensor, widths=(16, 32, 32), steps: int = 300,
                               batch_size: int = 32, lr: float = 2e-3, seed: int = 0):
    """Fit a small autoencoder on frames (N, 3, H, W) and return its encoder."""
    enc = _seeded(seed, ConvEncoder, 3, widths)
    dec = _seeded(seed + 1, ConvDecoder, widths)
    params = list(enc.parameters()) + list(dec.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    for step in range(steps):
        x = frames[rng.integers(len(frames), size=batch_size)]
        loss = ((dec(enc(x)) - x) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 100 == 0:
            log.info("appearance extractor step %d loss %.5f", step, loss.item())
    return enc


def train_structure_extractor(frames: torch.Tensor, heatmaps: torch.Tensor, widths=(16, 32),
                              steps: int = 300, batch_size: int = 32, lr: float = 2e-3,
                              seed: int = 0):
    """Fit an image -> (downsampled) heatmap regressor; frames (N, 3, H, W), heatmaps (N, L, H, W)."""
    model = _seeded(seed, HeatmapRegressor, heatmaps.shape[1], widths)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    for step in range(steps):
        idx = rng.integers(len(frames), size=batch_size)
        target = F.avg_pool2d(heatmaps[idx], model.factor) * model.factor
        loss = ((model(frames[idx]) - target) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if step % 100 == 0:
            log.info("structure extractor step %d loss %.5f", step, loss.item())
    return model
