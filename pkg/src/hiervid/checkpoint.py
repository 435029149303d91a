"""Versioned named-array checkpoints (numpy ``.npz`` with a JSON header)."""
from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np
import torch
from torch import nn

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def save_arrays(path, arrays: dict, meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = dict(meta, version=FORMAT_VERSION,
                  shapes={k: list(np.shape(v)) for k, v in arrays.items()})
    payload = {f"a/{k}": np.asarray(v) for k, v in arrays.items()}
    payload["__meta__"] = np.frombuffer(json.dumps(header, sort_keys=True).encode(), np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_arrays(path) -> tuple[dict, dict]:
    path = Path(path)
    try:
        with np.load(path, allow_pickle=False) as data:
            if "__meta__" not in data.files:
                raise CheckpointCorruptError(f"{path}: missing header")
            meta = json.loads(data["__meta__"].tobytes().decode())
            arrays = {k[2:]: data[k] for k in data.files if k.startswith("a/")}
    except CheckpointError:
        raise
    except FileNotFoundError:
        raise
    except (zipfile.BadZipFile, ValueError, OSError, EOFError, KeyError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable checkpoint ({exc})") from exc
    if meta.get("version") != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {meta.get('version')}, expected {FORMAT_VERSION}")
    for k, shape in meta.get("shapes", {}).items():
        if k not in arrays or list(arrays[k].shape) != shape:
            raise CheckpointCorruptError(f"{path}: array {k!r} missing or reshaped")
    return arrays, meta


def save_checkpoint(model: nn.Module, path, kind: str, config: dict | None = None) -> Path:
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = {"kind": kind, "arch": model.arch(), "config": config or {},
            "dtype": str(next(iter(arrays.values())).dtype) if arrays else "float32"}
    return save_arrays(path, arrays, meta)


def load_state(model: nn.Module, arrays: dict, source="checkpoint") -> nn.Module:
    expected = model.state_dict()
    missing = set(expected) - set(arrays)
    extra = set(arrays) - set(expected)
    if missing or extra:
        raise CheckpointShapeError(f"{source}: missing {sorted(missing)}, unexpected {sorted(extra)}")
    for k, v in expected.items():
        if tuple(v.shape) != tuple(arrays[k].shape):
            raise CheckpointShapeError(
                f"{source}: {k} has shape {tuple(arrays[k].shape)}, model expects {tuple(v.shape)}")
    model.load_state_dict({k: torch.as_tensor(arrays[k]) for k in expected})
    return model


def load_checkpoint(path, model: nn.Module | None = None, kind: str | None = None):
    """Load into ``model`` (shape-checked) or rebuild the model from the stored descriptor."""
    arrays, meta = load_arrays(path)
    if kind is not None and meta.get("kind") != kind:
        raise CheckpointError(f"{path}: holds a {meta.get('kind')!r} checkpoint, not {kind!r}")
    if model is None:
        model = build_from_meta(meta)
    return load_state(model, arrays, str(path)), meta


def build_from_meta(meta: dict) -> nn.Module:
    from .generator import AnalogyGenerator
    from .losses import Discriminator, build_extractors
    from .pose_predictor import PosePredictor
    arch = dict(meta["arch"])
    dtype = getattr(torch, meta.get("dtype", "float32"))
    kind = meta.get("kind")
    if kind == "pose":
        model = PosePredictor(**arch)
    elif kind == "generator":
        arch["widths"] = tuple(arch["widths"])
        model = AnalogyGenerator(**arch)
    elif kind == "discriminator":
        arch["widths"] = tuple(arch["widths"])
        model = Discriminator(**arch)
    elif kind == "extractors":
        model = build_extractors(**arch)
    else:
        raise CheckpointError(f"cannot rebuild a model of kind {kind!r}")
    return model.to(dtype).eval()
