"""Hierarchical long-term video prediction at desk scale.

Poses are forecast with a recurrent sequence model and future frames are
synthesized from the last observed frame by visual-structure analogy.
"""
from .dataset import PoseFrame, SwapMap, SynthConfig, VideoClip, load_clip, synth_generate
from .generator import AnalogyGenerator, analogy_generate
from .heatmap import composite_background, foreground_mask, render_heatmaps
from .pipeline import OracleEstimator, PredictionResult, predict_video
from .pose_predictor import PosePredictor, pose_loss, predict_sequence

__version__ = "0.1.0"

__all__ = ["PoseFrame", "SwapMap", "SynthConfig", "VideoClip", "load_clip", "synth_generate",
           "AnalogyGenerator", "analogy_generate", "composite_background", "foreground_mask",
           "render_heatmaps", "OracleEstimator", "PredictionResult", "predict_video",
           "PosePredictor", "pose_loss", "predict_sequence"]
