"""Diffusion-based optical flow estimation at desk scale."""

from .flowcore import (
    FlowField,
    FlowMetrics,
    ImagePair,
    NormFlow,
    backward_warp,
    compute_metrics,
    denormalize_flow,
    normalize_flow,
    resize_flow,
)
from .diffusion import DiffusionSchedule, make_schedule, q_sample, reverse_step, sample
from .dataio import Sample, ToyConfig, gen_toy_sample, read_flo, write_flo

__version__ = "0.1.0"

__all__ = [
    "FlowField",
    "FlowMetrics",
    "ImagePair",
    "NormFlow",
    "backward_warp",
    "compute_metrics",
    "denormalize_flow",
    "normalize_flow",
    "resize_flow",
    "DiffusionSchedule",
    "make_schedule",
    "q_sample",
    "reverse_step",
    "sample",
    "Sample",
    "ToyConfig",
    "gen_toy_sample",
    "read_flo",
    "write_flo",
    "__version__",
]
