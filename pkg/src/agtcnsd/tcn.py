"""Stacked dilated causal convolutions with residual connections.

With ``structural=True`` each block first compresses its input through a
per-step linear map before convolving; the plain variant convolves directly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class TcnConfig:
    n_layers: int = 4
    kernel_size: int = 3
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    channels: int = 32
    reduction: int = 16
    structural: bool = True

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        if len(self.dilations) != self.n_layers:
            raise ValueError(f"{self.n_layers} layers need {self.n_layers} dilations, got {self.dilations}")
        if min(self.n_layers, self.kernel_size, self.channels, self.reduction, *self.dilations) < 1:
            raise ValueError("TCN sizes and dilations must be positive")

    @property
    def receptive_field(self) -> int:
        return 1 + (self.kernel_size - 1) * sum(self.dilations)


@dataclass
class TcnLayerParams:
    kernel: Tensor  # [k, C_conv_in, C_out]
    kernel_b: Tensor  # [C_out]
    reduce_w: Tensor | None = None  # [C_in, reduction]
    reduce_b: Tensor | None = None
    residual_w: Tensor | None = None  # [C_in, C_out] when C_in != C_out

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        out = {}
        for name in ("reduce_w", "reduce_b", "kernel", "kernel_b", "residual_w"):
            t = getattr(self, name)
            if t is not None:
                out[prefix + name] = t
        return out

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        c_in: int,
        c_out: int,
        kernel_size: int,
        reduction: int | None = None,
    ) -> "TcnLayerParams":
        def normal(shape, fan_in):
            return Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape), requires_grad=True)

        conv_in = c_in if reduction is None else reduction
        p = cls(
            kernel=normal((kernel_size, conv_in, c_out), kernel_size * conv_in),
            kernel_b=Tensor(np.zeros(c_out), requires_grad=True),
        )
        if reduction is not None:
            p.reduce_w = normal((c_in, reduction), c_in)
            p.reduce_b = Tensor(np.zeros(reduction), requires_grad=True)
        if c_in != c_out:
            p.residual_w = normal((c_in, c_out), c_in)
        return p


def init_tcn(rng: np.random.Generator, c_in: int, config: TcnConfig) -> list[TcnLayerParams]:
    layers = []
    for _ in range(config.n_layers):
        red = config.reduction if config.structural else None
        layers.append(TcnLayerParams.init(rng, c_in, config.channels, config.kernel_size, red))
        c_in = config.channels
    return layers


def dilated_causal_conv(x, f, d: int, bias=None) -> Tensor:
    """``out[s] = sum_i f[i] x[s - d*i]`` with zero history before the first step.

    ``x`` is ``[..., T, C_in]`` and ``f`` is ``[k, C_in, C_out]``; a 1-D ``x``
    with a 1-D ``f`` is treated as a single channel.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    f = f if isinstance(f, Tensor) else Tensor(f)
    if x.ndim == 1 and f.ndim == 1:
        out = ad.causal_conv1d(ad.reshape(x, (-1, 1)), ad.reshape(f, (-1, 1, 1)), d, bias)
        return ad.reshape(out, (x.shape[0],))
    return ad.causal_conv1d(x, f, d, bias)


def tcn_block(x, params: TcnLayerParams, d: int) -> Tensor:
    """Reduction (optional) -> dilated causal conv -> ReLU -> residual add."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    c_in = x.shape[-1]
    h = x
    if params.reduce_w is not None:
        if params.reduce_w.shape[0] != c_in:
            raise ShapeError(f"block input has {c_in} channels, reduction expects {params.reduce_w.shape[0]}")
        h = ad.linear(h, params.reduce_w, params.reduce_b)
    h = ad.relu(ad.causal_conv1d(h, params.kernel, d, params.kernel_b))
    if params.residual_w is not None:
        res = ad.linear(x, params.residual_w)
    elif c_in != h.shape[-1]:
        raise ShapeError(f"residual path: {c_in} input channels vs {h.shape[-1]} output channels and no projection")
    else:
        res = x
    return h + res


def tcn_forward(x, config: TcnConfig, params: list[TcnLayerParams]) -> Tensor:
    if len(params) != config.n_layers:
        raise ValueError(f"config has {config.n_layers} layers, got {len(params)} parameter sets")
    h = x
    for p, d in zip(params, config.dilations):
        h = tcn_block(h, p, d)
    return h
