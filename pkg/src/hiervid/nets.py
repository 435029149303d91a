"""Convolutional building blocks shared by the generator, discriminator and extractors.

Resampling uses 4x4 stride-2 (transposed) convolutions with padding 1, so on
even-sized inputs every network here commutes with a horizontal mirror when
its kernels are mirrored too.
"""
from __future__ import annotations

import numpy as np
import torch
from torch import nn


def activation(name: str | None) -> nn.Module:
    if name is None or name == "none":
        return nn.Identity()
    if name == "relu":
        return nn.ReLU()
    if name == "lrelu":
        return nn.LeakyReLU(0.2)
    if name == "tanh":
        return nn.Tanh()
    raise ValueError(f"unknown activation {name!r}")


class ConvEncoder(nn.Module):
    """Blocks of (3x3 conv, act, 4x4 stride-2 conv); the final conv stays linear.

    With ``skips=True`` the forward pass returns a tuple: the activation after
    each block's 3x3 conv (full, 1/2, 1/4 ... resolution) followed by the
    bottleneck map.
    """

    def __init__(self, in_channels: int, widths=(16, 32, 64), act: str | None = "relu",
                 skips: bool = False):
        super().__init__()
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        c = in_channels
        for i, w in enumerate(widths):
            self.blocks.append(nn.Sequential(nn.Conv2d(c, w, 3, padding=1), activation(act)))
            down = [nn.Conv2d(w, w, 4, stride=2, padding=1)]
            if i < len(widths) - 1:
                down.append(activation(act))
            self.downs.append(nn.Sequential(*down))
            c = w
        self.out_channels = c
        self.factor = 2 ** len(widths)
        self.skips = skips

    def forward(self, x):
        feats = []
        for block, down in zip(self.blocks, self.downs):
            x = block(x)
            feats.append(x)
            x = down(x)
        if not self.skips:
            return x
        return (*feats, x)


class ConvDecoder(nn.Module):
    """Mirror of ``ConvEncoder``: 4x4 stride-2 transposed-conv blocks, then 3x3 conv + tanh.

    A stride-2 transposed convolution is fixed-position unpooling followed by a
    4x4 convolution, computed without materialising the zero-filled map. With
    ``skips=True`` the input is the encoder's feature tuple and each upsampled
    map is concatenated with the same-resolution skip map before a 3x3 conv.
    """

    def __init__(self, widths=(16, 32, 64), out_channels: int = 3, act: str | None = "relu",
                 skips: bool = False):
        super().__init__()
        self.ups = nn.ModuleList()
        self.merges = nn.ModuleList()
        c = widths[-1]
        for w in reversed(widths):
            self.ups.append(nn.Sequential(nn.ConvTranspose2d(c, w, 4, stride=2, padding=1),
                                          activation(act)))
            if skips:
                self.merges.append(nn.Sequential(nn.Conv2d(2 * w, w, 3, padding=1),
                                                 activation(act)))
            c = w
        self.head = nn.Sequential(nn.Conv2d(c, out_channels, 3, padding=1), nn.Tanh())
        self.skips = skips

    def forward(self, z):
        if not self.skips:
            for up in self.ups:
                z = up(z)
            return self.head(z)
        *feats, x = z
        for up, merge, skip in zip(self.ups, self.merges, reversed(feats)):
            x = merge(torch.cat([up(x), skip], 1))
        return self.head(x)


def frames_to_tensor(frames, dtype=torch.float32) -> torch.Tensor:
    """(H, W, 3) or (N, H, W, 3) arrays -> (N, 3, H, W) tensor."""
    a = np.asarray(frames)
    if a.ndim == 3:
        a = a[None]
    return torch.as_tensor(np.ascontiguousarray(a.transpose(0, 3, 1, 2)), dtype=dtype)


def tensor_to_frames(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().transpose(0, 2, 3, 1)


def zero_(module: nn.Module) -> nn.Module:
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def param_digest(module: nn.Module) -> str:
    import hashlib
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
