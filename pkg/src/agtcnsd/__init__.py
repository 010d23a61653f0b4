"""Multivariate chlorophyll forecasting: series decomposition, adaptive graph
convolution and dilated causal temporal convolution on a small numpy autodiff."""
from .autodiff import ShapeError, Tensor, backward, no_grad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import TimeSeriesFrame, chronological_split, load_csv, make_windows, preprocess
from .evaluation import benchmark_frame, compute_metrics, generate_synthetic, horizon_sweep, run_ablation
from .model import ModelConfig, init_params, model_forward, predict, train

__version__ = "0.1.0"

__all__ = [
    "ShapeError",
    "Tensor",
    "backward",
    "no_grad",
    "load_checkpoint",
    "save_checkpoint",
    "TimeSeriesFrame",
    "chronological_split",
    "load_csv",
    "make_windows",
    "preprocess",
    "benchmark_frame",
    "compute_metrics",
    "generate_synthetic",
    "horizon_sweep",
    "run_ablation",
    "ModelConfig",
    "init_params",
    "model_forward",
    "predict",
    "train",
]
