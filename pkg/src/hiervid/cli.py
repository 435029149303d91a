"""Command-line driver: synth-data, train-pose, train-gen, predict, evaluate, report."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import dataset
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .dataset import SynthConfig, load_split, load_swap_map, synth_generate
from .evaluation import EvalConfig, evaluate_variants, read_records, report, write_records
from .generator import GenTrainConfig, build_discriminator, build_generator, train_generator
from .heatmap import render_heatmaps_batch
from .losses import (PerceptualExtractors, train_appearance_extractor,
                     train_structure_extractor)
from .nets import frames_to_tensor
from .pipeline import OracleEstimator, predict_video, save_prediction
from .pose_predictor import PoseTrainConfig, train_pose_predictor

log = logging.getLogger("hiervid")

COMMANDS = ("synth-data", "train-pose", "train-gen", "predict", "evaluate", "report")


class Paths:
    def __init__(self, cfg: RunConfig, out: Path):
        self.out = out
        self.data = Path(cfg.data.root) if cfg.data.root else out / "data"
        self.models = out / "models"
        self.logs = out / "logs"
        self.predictions = out / "predictions"
        self.eval = out / "eval"
        self.report = out / "report"


def synth_config(cfg: RunConfig) -> SynthConfig:
    d = cfg.data
    return SynthConfig(n_landmarks=d.n_landmarks, image_size=d.image_size,
                       clip_length=d.clip_length, k=cfg.k, motions=tuple(d.motions),
                       n_train=d.n_train, n_test=d.n_test, period_range=tuple(d.period_range),
                       drop_prob=d.drop_prob, bg_texture=d.bg_texture)


def cmd_synth_data(cfg, paths, seeds):
    root = synth_generate(synth_config(cfg), seeds["data"], paths.data)
    log.info("wrote dataset to %s", root)


def _write_curve(path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_train_pose(cfg, paths, seeds):
    clips = load_split(paths.data, "train")
    p = cfg.pose
    tc = PoseTrainConfig(k=cfg.k, T=cfg.T, hidden=p.hidden, activation=p.activation,
                         steps=p.steps, batch_size=p.batch_size, lr=p.lr, clip_norm=p.clip_norm,
                         flip_prob=p.flip_prob)
    from .pose_predictor import build_pose_predictor
    model = build_pose_predictor(clips[0].n_landmarks, p.hidden, p.activation, seeds["pose_init"])
    model, losses = train_pose_predictor(clips, tc, seeds["pose_train"], load_swap_map(paths.data),
                                         model)
    save_checkpoint(model, paths.models / "pose.npz", "pose", cfg.to_dict())
    _write_curve(paths.logs / "pose_loss.csv", ["step", "L_pose"],
                 [(i, repr(v)) for i, v in enumerate(losses)])
    log.info("pose loss %.5f -> %.5f", losses[0], losses[-1])


def _extractor_data(clips, cfg, rng):
    n_frames = sum(len(c) for c in clips)
    take = min(cfg.gen.extractor_frames, n_frames)
    flat = rng.choice(n_frames, size=take, replace=False)
    offsets = np.cumsum([0] + [len(c) for c in clips])
    frames, coords, visible = [], [], []
    for i in np.sort(flat):
        ci = int(np.searchsorted(offsets, i, side="right") - 1)
        t = int(i - offsets[ci])
        frames.append(clips[ci].frames[t])
        coords.append(clips[ci].coords[t])
        visible.append(clips[ci].visible[t])
    size = clips[0].size
    hm = render_heatmaps_batch(np.stack(coords), np.stack(visible), cfg.sigma, size, np.float32)
    return frames_to_tensor(np.stack(frames)), torch.as_tensor(hm)


def cmd_train_gen(cfg, paths, seeds):
    clips = load_split(paths.data, "train")
    n_landmarks = clips[0].n_landmarks
    g = cfg.gen
    seed = seeds["extractors"]
    frames, heatmaps = _extractor_data(clips, cfg, np.random.default_rng(seed))
    c1 = train_appearance_extractor(frames, steps=g.extractor_steps, seed=seed)
    c2 = train_structure_extractor(frames, heatmaps, steps=g.extractor_steps, seed=seed + 1)
    extractors = PerceptualExtractors(c1, c2, {"n_landmarks": n_landmarks,
                                               "c1_widths": [16, 32, 32], "c2_widths": [16, 32]})
    save_checkpoint(extractors, paths.models / "extractors.npz", "extractors")

    gen = build_generator(n_landmarks, tuple(g.widths), image_size=cfg.data.image_size,
                          sigma=cfg.sigma, seed=seeds["gen_init"], skips=g.skips)
    disc = build_discriminator(n_landmarks, tuple(g.disc_widths), cfg.data.image_size,
                               seed=seeds["gen_init"] + 1)
    tc = GenTrainConfig(steps=g.steps, batch_size=g.batch_size, lr_g=g.lr_g, lr_d=g.lr_d,
                        max_jump=g.max_jump, w_img=g.w_img, w_feat=g.w_feat, w_gen=g.w_gen,
                        flip_prob=g.flip_prob)
    gen, disc, curves = train_generator(clips, gen, disc, extractors, tc, seeds["gen_train"],
                                        load_swap_map(paths.data))
    save_checkpoint(gen, paths.models / "generator.npz", "generator", cfg.to_dict())
    save_checkpoint(disc, paths.models / "discriminator.npz", "discriminator", cfg.to_dict())
    rows = [(i, repr(a), repr(b), repr(c), repr(d)) for i, (a, b, c, d) in
            enumerate(zip(curves["img"], curves["feat"], curves["gen"], curves["disc"]))]
    _write_curve(paths.logs / "gen_loss.csv", ["step", "L_img", "L_feat", "L_Gen", "L_Disc"], rows)
    log.info("image loss %.5f -> %.5f", curves["img"][0], curves["img"][-1])


def _load_models(paths):
    pose, _ = load_checkpoint(paths.models / "pose.npz", kind="pose")
    gen, _ = load_checkpoint(paths.models / "generator.npz", kind="generator")
    return pose, gen


def cmd_predict(cfg, paths, seeds):
    pose, gen = _load_models(paths)
    for clip in load_split(paths.data, "test"):
        result = predict_video(clip.frames[:cfg.k], cfg.T, OracleEstimator(clip), pose, gen)
        save_prediction(result, paths.predictions / clip.clip_id)
    log.info("wrote predictions to %s", paths.predictions)


def eval_config(cfg: RunConfig) -> EvalConfig:
    e = cfg.eval
    return EvalConfig(k=cfg.k, T=cfg.T, mask_sigma=e.mask_sigma,
                      mask_threshold=e.mask_threshold, mask_dilate=e.mask_dilate,
                      flow_radius=e.flow_radius, flow_block=e.flow_block)


def cmd_evaluate(cfg, paths, seeds):
    pose, gen = _load_models(paths)
    records = evaluate_variants(load_split(paths.data, "test"), pose, gen, eval_config(cfg))
    write_records(records, paths.eval / "records.csv")
    log.info("wrote %d records to %s", len(records), paths.eval / "records.csv")


def cmd_report(cfg, paths, seeds):
    src = paths.eval / "records.csv"
    if not src.exists():
        raise FileNotFoundError(f"{src} not found; run 'evaluate' first")
    written = report(read_records(src), paths.report, plot=cfg.eval.plot)
    log.info("wrote %d report files to %s", len(written), paths.report)


HANDLERS = {"synth-data": cmd_synth_data, "train-pose": cmd_train_pose,
            "train-gen": cmd_train_gen, "predict": cmd_predict, "evaluate": cmd_evaluate,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiervid", description=__doc__)
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", type=Path, default=None, help="YAML run configuration")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config value (repeatable)")
    parser.add_argument("--out", type=Path, default=None, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="root random seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def resolve_out(args, cfg: RunConfig) -> Path:
    if args.out is not None:
        return args.out
    if cfg.out:
        return Path(cfg.out)
    if os.environ.get("HIERVID_OUT"):
        return Path(os.environ["HIERVID_OUT"])
    return Path("hiervid_out")


def _setup_logging(verbose: bool, log_file: Path):
    log_file.parent.mkdir(parents=True, exist_ok=True)
    root = logging.getLogger()
    for h in list(root.handlers):
        if getattr(h, "_hiervid", False):
            root.removeHandler(h)
            h.close()
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    handlers = [logging.StreamHandler(sys.stderr), logging.FileHandler(log_file)]
    for h in handlers:
        h.setFormatter(fmt)
        h._hiervid = True
        root.addHandler(h)
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    return handlers


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.validate(args.command)
    except (ConfigError, OSError) as exc:
        print(f"hiervid: invalid config: {exc}", file=sys.stderr)
        return 2

    out = resolve_out(args, cfg)
    paths = Paths(cfg, out)
    handlers = _setup_logging(args.verbose, paths.logs / f"{args.command}.log")
    torch.set_num_threads(cfg.workers)
    seeds = cfg.seeds()
    log.info("command %s, seed %d, out %s", args.command, cfg.seed, out)
    log.info("overrides: %s", args.overrides)
    log.info("resolved config: %s", json.dumps(cfg.to_dict(), sort_keys=True))
    try:
        HANDLERS[args.command](cfg, paths, seeds)
    except (CheckpointError, dataset.ClipFormatError, FileNotFoundError, ValueError,
            RuntimeError) as exc:
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        return 1
    finally:
        root = logging.getLogger()
        for h in handlers:
            root.removeHandler(h)
            h.close()
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
