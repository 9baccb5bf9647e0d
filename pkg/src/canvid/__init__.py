"""Masked autoregressive video generation with canvas-initialized decoding.

Frames are generated one (or one group) at a time: a hybrid-masked temporal
transformer summarizes the history, a canvas network drafts the coming
frame, and a masked spatial transformer plus per-token flow head fill in the
tokens set by set, starting from the canvas instead of a uniform mask.
"""
import os

# The work units here are small; BLAS thread fan-out costs more than it buys
# and single-threaded kernels keep runs reproducible. Must be set before
# numpy initializes its thread pools (a no-op if numpy is already loaded).
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

__version__ = "0.1.0"

from .autodiff import GradTape, Tensor, backward, finite_diff_check
from .generation import (AugmentConfig, GuidanceScales, MaskPlan, SampleSettings,
                         Sampler, cfg_velocity, cosine_set_sizes, generate_frame, rollout)
from .model import ModelConfig, VideoModel
from .optim import OptState, adam_step
from .rng import RngStream

__all__ = [
    "AugmentConfig", "GradTape", "GuidanceScales", "MaskPlan", "ModelConfig",
    "OptState", "RngStream", "SampleSettings", "Sampler", "Tensor", "VideoModel",
    "adam_step", "backward", "cfg_velocity", "cosine_set_sizes", "finite_diff_check",
    "generate_frame", "rollout",
]
