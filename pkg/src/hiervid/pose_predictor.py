"""Sequence-to-sequence pose forecaster.

A single LSTM cell first reads ``k`` observed poses, then keeps running on a
zero input vector to emit ``T`` future poses. The decoder never sees its own
predictions, so forecasting errors cannot feed back into the recurrence.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .dataset import PoseFrame, SwapMap, VideoClip

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value} at batch {step}")
        self.step = step


@dataclass
class RecurrentState:
    h: np.ndarray
    c: np.ndarray


def flatten_pose(coords, visible):
    """(..., L, 2) coords + (..., L) mask -> (..., 2L) with invisible landmarks zeroed."""
    coords = np.asarray(coords, dtype=np.float64) * np.asarray(visible)[..., None]
    return coords.reshape(*coords.shape[:-2], -1)


class PosePredictor(nn.Module):
    def __init__(self, n_landmarks: int, hidden: int = 128, activation: str = "tanh"):
        super().__init__()
        if activation not in ("tanh", "identity"):
            raise ValueError(f"activation must be 'tanh' or 'identity', got {activation!r}")
        self.n_landmarks = n_landmarks
        self.hidden = hidden
        self.activation = activation
        self.cell = nn.LSTMCell(2 * n_landmarks, hidden)
        self.proj = nn.Linear(hidden, 2 * n_landmarks, bias=False)

    def arch(self) -> dict:
        return {"n_landmarks": self.n_landmarks, "hidden": self.hidden,
                "activation": self.activation}

    def initial_state(self, batch: int, dtype=None):
        dtype = dtype or self.proj.weight.dtype
        z = torch.zeros(batch, self.hidden, dtype=dtype)
        return z, z.clone()

    def output(self, h):
        y = self.proj(h)
        return torch.tanh(y) if self.activation == "tanh" else y

    def encode_step(self, p, state):
        return self.cell(p, state)

    def decode_step(self, state):
        h, c = state
        zero = torch.zeros(h.shape[0], 2 * self.n_landmarks, dtype=h.dtype)
        h, c = self.cell(zero, (h, c))
        return self.output(h), (h, c)

    def forward(self, observed, horizon: int):
        """observed: (B, k, 2L) -> predictions (B, T, 2L)."""
        if observed.shape[1] < 1:
            raise ValueError("need at least one observed pose")
        state = self.initial_state(observed.shape[0], observed.dtype)
        for t in range(observed.shape[1]):
            state = self.encode_step(observed[:, t], state)
        preds = []
        for _ in range(horizon):
            p, state = self.decode_step(state)
            preds.append(p)
        if not preds:
            return observed.new_zeros(observed.shape[0], 0, observed.shape[2])
        return torch.stack(preds, 1)


def build_pose_predictor(n_landmarks: int, hidden: int = 128, activation: str = "tanh",
                         seed: int = 0, dtype=torch.float32) -> PosePredictor:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = PosePredictor(n_landmarks, hidden, activation)
    return model.to(dtype)


def _as_tensor(x, model):
    return torch.as_tensor(np.asarray(x), dtype=model.proj.weight.dtype)


# -- single-sample API over PoseFrame / RecurrentState -------------------------

def zero_state(model: PosePredictor) -> RecurrentState:
    return RecurrentState(np.zeros(model.hidden), np.zeros(model.hidden))


@torch.no_grad()
def encode_step(p: PoseFrame, state: RecurrentState, model: PosePredictor) -> RecurrentState:
    if p.n_landmarks != model.n_landmarks:
        raise ValueError(f"pose has {p.n_landmarks} landmarks, model expects {model.n_landmarks}")
    if state.h.shape != (model.hidden,) or state.c.shape != (model.hidden,):
        raise ValueError("state does not match the model's hidden size")
    x = _as_tensor(flatten_pose(p.coords, p.visible), model)[None]
    h, c = model.encode_step(x, (_as_tensor(state.h, model)[None], _as_tensor(state.c, model)[None]))
    return RecurrentState(h[0].double().numpy(), c[0].double().numpy())


@torch.no_grad()
def decode_step(state: RecurrentState, model: PosePredictor) -> tuple[PoseFrame, RecurrentState]:
    pred, (h, c) = model.decode_step((_as_tensor(state.h, model)[None],
                                      _as_tensor(state.c, model)[None]))
    coords = pred[0].double().numpy().reshape(-1, 2)
    return (PoseFrame(coords, np.ones(len(coords), bool)),
            RecurrentState(h[0].double().numpy(), c[0].double().numpy()))


def predict_sequence(observed: Sequence[PoseFrame], horizon: int, model: PosePredictor,
                     encode: Callable = None, decode: Callable = None) -> list[PoseFrame]:
    """Observe ``k`` poses, then forecast ``horizon`` poses without reading them back."""
    if len(observed) == 0:
        raise ValueError("empty observation")
    encode = encode or encode_step
    decode = decode or decode_step
    state = zero_state(model)
    for p in observed:
        state = encode(p, state, model)
    out = []
    for _ in range(horizon):
        p, state = decode(state, model)
        out.append(p)
    return out


# -- loss ------------------------------------------------------------------------

def masked_pose_loss(pred, target, mask):
    """Visibility-masked squared error, normalised by T*L. Shapes (B, T, L, 2) / (B, T, L)."""
    sq = ((pred - target) ** 2).sum(-1) * mask
    t, l = mask.shape[-2:]
    return sq.sum((-2, -1)).mean() / (t * l)


def pose_loss(pred: Sequence[PoseFrame], target: Sequence[PoseFrame]) -> float:
    if len(pred) != len(target):
        raise ValueError(f"length mismatch: {len(pred)} predictions vs {len(target)} targets")
    if len(pred) == 0:
        return 0.0
    p = np.stack([f.coords for f in pred])
    q = np.stack([f.coords for f in target])
    if p.shape != q.shape:
        raise ValueError(f"landmark count mismatch: {p.shape} vs {q.shape}")
    m = np.stack([f.visible for f in target])
    sq = np.where(m, ((p - q) ** 2).sum(-1), 0.0)
    return float(sq.sum() / (p.shape[0] * p.shape[1]))


# -- training --------------------------------------------------------------------

@dataclass
class PoseTrainConfig:
    k: int = 10
    T: int = 16
    hidden: int = 128
    activation: str = "tanh"
    steps: int = 3000
    batch_size: int = 64
    lr: float = 1e-3
    clip_norm: float = 5.0
    flip_prob: float = 0.5
    log_every: int = 100


def window_arrays(clips: Sequence[VideoClip], length: int):
    """All contiguous windows of ``length`` frames: coords (N, length, L, 2), visible (N, length, L)."""
    coords, vis = [], []
    for clip in clips:
        if len(clip) < length:
            continue
        for s in range(len(clip) - length + 1):
            coords.append(clip.coords[s:s + length])
            vis.append(clip.visible[s:s + length])
    if not coords:
        raise ValueError(f"no clip is long enough for windows of {length} frames")
    return np.stack(coords), np.stack(vis)


def _flip(coords, vis, perm):
    coords = coords[..., perm, :].copy()
    coords[..., 0] *= -1
    return coords, vis[..., perm]


def train_pose_predictor(clips: Sequence[VideoClip], config: PoseTrainConfig, seed: int = 0,
                         swap: SwapMap | None = None, model: PosePredictor | None = None):
    """Fit the forecaster with Adam on the masked loss; returns (model, loss curve)."""
    k, T = config.k, config.T
    coords, vis = window_arrays(clips, k + T)
    n_landmarks = coords.shape[2]
    if model is None:
        model = build_pose_predictor(n_landmarks, config.hidden, config.activation, seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
    perm = swap.permutation(n_landmarks) if swap is not None else None
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    dtype = model.proj.weight.dtype
    losses = []
    model.train()
    for step in range(config.steps):
        idx = rng.integers(len(coords), size=config.batch_size)
        c, v = coords[idx], vis[idx]
        if perm is not None and config.flip_prob > 0:
            flip = rng.random(len(idx)) < config.flip_prob
            c[flip], v[flip] = _flip(c[flip], v[flip], perm)
        obs = torch.as_tensor(flatten_pose(c[:, :k], v[:, :k]), dtype=dtype)
        target = torch.as_tensor(c[:, k:], dtype=dtype)
        mask = torch.as_tensor(v[:, k:], dtype=dtype)
        pred = model(obs, T).reshape(target.shape)
        loss = masked_pose_loss(pred, target, mask)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(step, value)
        opt.zero_grad()
        loss.backward()
        if config.clip_norm:
            nn.utils.clip_grad_norm_(model.parameters(), config.clip_norm)
        opt.step()
        losses.append(value)
        if config.log_every and step % config.log_every == 0:
            log.info("pose step %d loss %.5f", step, value)
    model.eval()
    return model, losses


def freeze_last_baseline(observed: Sequence[PoseFrame], horizon: int) -> list[PoseFrame]:
    """Repeat the most recent visible position of every landmark (0 if never seen)."""
    last = np.zeros_like(observed[-1].coords)
    for p in observed:
        last[p.visible] = p.coords[p.visible]
    return [PoseFrame(last.copy(), np.ones(len(last), bool)) for _ in range(horizon)]


def config_dict(config) -> dict:
    return asdict(config)
