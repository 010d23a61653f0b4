"""Trend/period split of input windows and the two feature branches fed by it.

The moving-average split and the spectral top-k filter run on plain arrays:
they are parameter-free and the bin selection is not differentiable, so the
model treats them as preprocessing. Only the branches carry gradients.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

DEFAULT_AVG_WINDOW = 12
DEFAULT_TOPK = 15
PERIOD_KERNELS = (3, 5, 7)


@dataclass
class DecompositionResult:
    trend: np.ndarray
    raw_period: np.ndarray
    pure_period: np.ndarray | None = None


def moving_average(x: np.ndarray, avg_window: int, axis: int = -2) -> np.ndarray:
    """Centered moving average with edge-replicated padding; output keeps the input length."""
    if avg_window < 1:
        raise ValueError(f"avg_window must be >= 1, got {avg_window}")
    x = np.asarray(x, dtype=np.float64)
    x = np.moveaxis(x, axis, -1)
    left = (avg_window - 1) // 2
    right = avg_window - 1 - left
    padded = np.concatenate(
        [np.repeat(x[..., :1], left, axis=-1), x, np.repeat(x[..., -1:], right, axis=-1)], axis=-1
    )
    windows = np.lib.stride_tricks.sliding_window_view(padded, avg_window, axis=-1)
    return np.moveaxis(windows.mean(axis=-1), -1, axis)


def moving_average_decompose(window, avg_window: int = DEFAULT_AVG_WINDOW, axis: int = -2) -> DecompositionResult:
    """Split ``window`` (time along ``axis``) into trend and raw periodic parts."""
    window = np.asarray(window, dtype=np.float64)
    trend = moving_average(window, avg_window, axis=axis)
    return DecompositionResult(trend=trend, raw_period=window - trend)


def fft_topk_filter(x, k: int, axis: int = -1) -> np.ndarray:
    """Keep the ``k`` highest-power frequency bins of a real series, zero the rest.

    Bins are the one-sided (nonnegative) frequencies of the real FFT; the
    inverse real FFT restores each retained bin's conjugate mirror. Ties in
    power go to the lower frequency.
    """
    if isinstance(x, Tensor):
        if x.requires_grad:
            raise TypeError("spectral filtering is not differentiable; pass a plain array")
        x = x.data
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[axis]
    n_bins = n // 2 + 1
    if not 1 <= k <= n_bins:
        raise ValueError(f"k must lie in [1, {n_bins}] for a series of length {n}, got {k}")
    spec = np.fft.rfft(x, axis=axis)
    if k == n_bins:
        kept = spec
    else:
        power = np.abs(spec) ** 2
        order = np.argsort(-np.moveaxis(power, axis, -1), axis=-1, kind="stable")
        mask = np.zeros(order.shape, dtype=bool)
        np.put_along_axis(mask, order[..., :k], True, axis=-1)
        kept = spec * np.moveaxis(mask, -1, axis)
    return np.fft.irfft(kept, n=n, axis=axis)


def decompose(window, avg_window: int = DEFAULT_AVG_WINDOW, k: int = DEFAULT_TOPK) -> DecompositionResult:
    """Full split of ``[..., T, F]`` windows including the filtered period."""
    res = moving_average_decompose(window, avg_window, axis=-2)
    res.pure_period = fft_topk_filter(res.raw_period, k, axis=-2)
    return res


# ---------------------------------------------------------------- learnable branches

@dataclass
class DecompBranchParams:
    trend_w: Tensor  # [F, H]
    trend_b: Tensor  # [H]
    kernels: dict[int, Tensor]  # size -> [size, F, C_p]
    kernel_b: dict[int, Tensor]  # size -> [C_p]
    fuse_w: Tensor  # [len(kernels) * C_p, H]
    fuse_b: Tensor  # [H]

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = {f"{prefix}trend_w": self.trend_w, f"{prefix}trend_b": self.trend_b}
        for size in sorted(self.kernels):
            out[f"{prefix}conv{size}_w"] = self.kernels[size]
            out[f"{prefix}conv{size}_b"] = self.kernel_b[size]
        out[f"{prefix}fuse_w"] = self.fuse_w
        out[f"{prefix}fuse_b"] = self.fuse_b
        return out

    @classmethod
    def init(
        cls, rng: np.random.Generator, n_features: int, hidden: int, period_channels: int, kernels=PERIOD_KERNELS
    ) -> "DecompBranchParams":
        if tuple(sorted(kernels)) != PERIOD_KERNELS:
            raise ValueError(f"period kernels must be {PERIOD_KERNELS}, got {tuple(kernels)}")

        def normal(shape, fan_in):
            return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape), requires_grad=True)

        ks = {s: normal((s, n_features, period_channels), s * n_features) for s in PERIOD_KERNELS}
        kb = {s: Tensor(np.zeros(period_channels), requires_grad=True) for s in PERIOD_KERNELS}
        return cls(
            trend_w=normal((n_features, hidden), n_features),
            trend_b=Tensor(np.zeros(hidden), requires_grad=True),
            kernels=ks,
            kernel_b=kb,
            fuse_w=normal((len(ks) * period_channels, hidden), len(ks) * period_channels),
            fuse_b=Tensor(np.zeros(hidden), requires_grad=True),
        )


def trend_branch(trend, params: DecompBranchParams) -> Tensor:
    """Per-time-step affine map across the feature axis."""
    return ad.linear(trend, params.trend_w, params.trend_b)


def period_branch(pure_period, params: DecompBranchParams) -> Tensor:
    """Causal convolutions with kernels 3, 5 and 7, concatenated then linearly fused."""
    x = pure_period if isinstance(pure_period, Tensor) else Tensor(pure_period)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ValueError(f"period branch needs [..., T, F] input with T >= 1, got {x.shape}")
    maps = [ad.causal_conv1d(x, params.kernels[s], 1, params.kernel_b[s]) for s in sorted(params.kernels)]
    return ad.linear(ad.concat(maps, axis=-1), params.fuse_w, params.fuse_b)


def branches_forward(trend, pure_period, params: DecompBranchParams) -> Tensor:
    return trend_branch(trend, params) + period_branch(pure_period, params)


def decomposition_forward(
    window, params: DecompBranchParams, avg_window: int = DEFAULT_AVG_WINDOW, k: int = DEFAULT_TOPK
) -> Tensor:
    """Decompose ``[..., T, F]`` windows and sum the trend and period branch outputs."""
    if isinstance(window, Tensor):
        if window.requires_grad:
            raise ValueError("decomposition input must not require gradients")
        window = window.data
    res = decompose(window, avg_window, k)
    return branches_forward(res.trend, res.pure_period, params)
