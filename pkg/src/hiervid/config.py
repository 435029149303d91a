"""Run configuration: a nested YAML file plus ``key.path=value`` overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .dataset import MOTIONS


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass
class DataSection:
    root: str | None = None
    n_landmarks: int = 6
    image_size: int = 64
    clip_length: int = 40
    n_train: int = 200
    n_test: int = 40
    motions: list = field(default_factory=lambda: list(MOTIONS))
    period_range: list = field(default_factory=lambda: [10.0, 24.0])
    drop_prob: float = 0.02
    bg_texture: float = 0.08


@dataclass
class PoseSection:
    hidden: int = 128
    activation: str = "tanh"
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    clip_norm: float = 5.0
    flip_prob: float = 0.5


@dataclass
class GenSection:
    widths: list = field(default_factory=lambda: [16, 32, 64])
    skips: bool = True
    disc_widths: list = field(default_factory=lambda: [16, 32, 64, 64])
    max_jump: int = 16
    steps: int = 3000
    batch_size: int = 16
    lr_g: float = 1e-3
    lr_d: float = 2e-4
    w_img: float = 1.0
    w_feat: float = 0.15
    w_gen: float = 0.001
    flip_prob: float = 0.5
    extractor_steps: int = 300
    extractor_frames: int = 2000


@dataclass
class EvalSection:
    mask_sigma: float = 5.0
    mask_threshold: float = 0.3
    mask_dilate: int = 2
    flow_radius: int = 4
    flow_block: int = 8
    plot: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    out: str | None = None
    k: int = 10
    T: int = 16
    sigma: float = 1.5
    workers: int = 1
    data: DataSection = field(default_factory=DataSection)
    pose: PoseSection = field(default_factory=PoseSection)
    gen: GenSection = field(default_factory=GenSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def seeds(self) -> dict:
        """Independent per-component seeds split from the root seed."""
        names = ("data", "pose_init", "pose_train", "gen_init", "gen_train", "extractors")
        children = np.random.SeedSequence(self.seed).spawn(len(names))
        return {n: int(c.generate_state(1)[0]) for n, c in zip(names, children)}

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def validate(self, command: str | None = None) -> "RunConfig":
        positive = {"k": self.k, "T": self.T, "sigma": self.sigma, "workers": self.workers,
                    "data.n_landmarks": self.data.n_landmarks,
                    "data.image_size": self.data.image_size,
                    "data.clip_length": self.data.clip_length,
                    "data.n_train": self.data.n_train, "data.n_test": self.data.n_test,
                    "pose.hidden": self.pose.hidden, "pose.steps": self.pose.steps,
                    "pose.batch_size": self.pose.batch_size, "pose.lr": self.pose.lr,
                    "gen.max_jump": self.gen.max_jump, "gen.steps": self.gen.steps,
                    "gen.batch_size": self.gen.batch_size, "gen.lr_g": self.gen.lr_g,
                    "gen.lr_d": self.gen.lr_d, "gen.extractor_steps": self.gen.extractor_steps,
                    "gen.extractor_frames": self.gen.extractor_frames,
                    "eval.mask_sigma": self.eval.mask_sigma,
                    "eval.flow_radius": self.eval.flow_radius,
                    "eval.flow_block": self.eval.flow_block}
        for name, value in positive.items():
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(name, f"expected a number, got {value!r}")
            if not value > 0:
                raise ConfigError(name, f"must be positive, got {value!r}")
        if self.k + self.T > self.data.clip_length:
            raise ConfigError("T", f"k + T = {self.k + self.T} exceeds data.clip_length "
                                   f"= {self.data.clip_length}")
        if self.data.n_test < 10 and command in ("evaluate", "report"):
            raise ConfigError("data.n_test", "motion deciles need at least 10 test clips")
        if self.pose.activation not in ("tanh", "identity"):
            raise ConfigError("pose.activation", "must be 'tanh' or 'identity'")
        if not 0 < self.eval.mask_threshold < 1:
            raise ConfigError("eval.mask_threshold", "must lie in (0, 1)")
        if self.image_size_divisor() and self.data.image_size % self.image_size_divisor():
            raise ConfigError("data.image_size",
                              f"must be divisible by {self.image_size_divisor()}")
        unknown = set(self.data.motions) - set(MOTIONS)
        if unknown:
            raise ConfigError("data.motions", f"unknown motion families {sorted(unknown)}")
        return self

    def image_size_divisor(self) -> int:
        return max(2 ** len(self.gen.widths), 2 ** len(self.gen.disc_widths))


def _coerce(name: str, current, value):
    if isinstance(current, bool):
        if isinstance(value, str):
            low = value.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
        if isinstance(value, bool):
            return value
        raise ConfigError(name, f"expected a boolean, got {value!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, str):
            try:
                return int(value)
            except ValueError:
                pass
        raise ConfigError(name, f"expected an integer, got {value!r}")
    if isinstance(current, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(name, f"expected a number, got {value!r}") from None
    if isinstance(current, list):
        if isinstance(value, str):
            value = yaml.safe_load(value)
        if not isinstance(value, list):
            raise ConfigError(name, f"expected a list, got {value!r}")
        return value
    return value


def _apply(obj, data: dict, prefix: str = ""):
    fields = {f.name: f for f in dataclasses.fields(obj)}
    for key, value in data.items():
        name = f"{prefix}{key}"
        if key not in fields:
            raise ConfigError(name, "unknown configuration key")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(name, "expected a mapping")
            _apply(current, value, f"{name}.")
        elif current is None:
            setattr(obj, key, value)
        else:
            setattr(obj, key, _coerce(name, current, value))


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(text, "override must look like key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def set_path(cfg: RunConfig, dotted: str, value):
    parts = dotted.split(".")
    nested: dict = {}
    cur = nested
    for p in parts[:-1]:
        cur = cur.setdefault(p, {})
    cur[parts[-1]] = value
    _apply(cfg, nested)


def load_config(path=None, overrides=()) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(str(path), f"invalid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(str(path), "top level must be a mapping")
        _apply(cfg, data)
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        set_path(cfg, key, value)
    return cfg
