"""Adaptive graph convolution over feature nodes.

Each input parameter is a node. Node relations come from a learned embedding
(``A = softmax(relu(E E^T))``, row-wise) and every node gets its own weight
matrix generated from a shared factor: ``theta_n = E_z[n] . W_z``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

INIT_STD = 0.1


@dataclass
class AdaptiveGraphParams:
    E_A: Tensor  # [N, d_e]
    E_z: Tensor  # [N, d_z]
    W_z: Tensor  # [d_z, C_in, C_out]
    b_z: Tensor  # [d_z, C_out]

    @property
    def n_nodes(self) -> int:
        return self.E_A.shape[0]

    def named(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}E_A": self.E_A, f"{prefix}E_z": self.E_z, f"{prefix}W_z": self.W_z, f"{prefix}b_z": self.b_z}

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        n_nodes: int,
        c_in: int,
        c_out: int,
        embed_dim: int = 7,
        factor_dim: int = 7,
        std: float = INIT_STD,
    ) -> "AdaptiveGraphParams":
        def normal(*shape):
            return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

        return cls(
            E_A=normal(n_nodes, embed_dim),
            E_z=normal(n_nodes, factor_dim),
            W_z=normal(factor_dim, c_in, c_out),
            b_z=normal(factor_dim, c_out),
        )


@dataclass
class StaticGraphSpec:
    """Fixed graph for the classic first-order GCN; used as a reference only."""

    adjacency: np.ndarray
    theta: np.ndarray
    bias: np.ndarray

    @property
    def degree(self) -> np.ndarray:
        return np.diag(self.adjacency.sum(axis=1))


def adaptive_adjacency(E_A) -> Tensor:
    E = E_A if isinstance(E_A, Tensor) else Tensor(E_A)
    return ad.softmax_rows(ad.relu(ad.einsum("nd,md->nm", E, E)))


def standard_gcn_forward(X, spec: StaticGraphSpec) -> np.ndarray:
    """``Z = (I + D^-1/2 A D^-1/2) X theta + b`` on plain arrays."""
    A = np.asarray(spec.adjacency, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if np.any(A < 0):
        raise ValueError("adjacency must be nonnegative")
    deg = A.sum(axis=1)
    used = (A != 0).any(axis=0) | (A != 0).any(axis=1)
    if np.any((deg <= 0) & used):
        raise ValueError("zero-degree node participates in the graph")
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.where(deg > 0, deg, 1.0)), 0.0)
    norm = inv_sqrt[:, None] * A * inv_sqrt[None, :]
    return (np.eye(len(A)) + norm) @ X @ spec.theta + spec.bias


def node_weights(params: AdaptiveGraphParams) -> tuple[Tensor, Tensor]:
    """Per-node ``[N, C_in, C_out]`` weights and ``[N, C_out]`` biases."""
    theta = ad.einsum("nd,dio->nio", params.E_z, params.W_z)
    bias = ad.einsum("nd,do->no", params.E_z, params.b_z)
    return theta, bias


def adaptive_gcn_forward(X, params: AdaptiveGraphParams, adjacency=None) -> Tensor:
    """Adaptive graph convolution of node states ``X`` shaped ``[..., N, C_in]``.

    ``adjacency`` overrides the learned matrix (used to test the layer as a
    pure function of A).
    """
    X = X if isinstance(X, Tensor) else Tensor(X)
    N, d_z = params.E_z.shape
    if X.ndim < 2:
        raise ShapeError(f"node states need shape [..., N, C_in], got {X.shape}")
    if X.shape[-2] != N:
        raise ShapeError(f"node axis: input has {X.shape[-2]} nodes, parameters have {N}")
    if params.E_A.shape[0] != N:
        raise ShapeError(f"node axis: E_A has {params.E_A.shape[0]} rows, E_z has {N}")
    if params.W_z.shape[0] != d_z or params.b_z.shape[0] != d_z:
        raise ShapeError(f"factor axis: E_z has {d_z} columns, W_z {params.W_z.shape}, b_z {params.b_z.shape}")
    if X.shape[-1] != params.W_z.shape[1]:
        raise ShapeError(f"channel axis: input has {X.shape[-1]} channels, W_z expects {params.W_z.shape[1]}")
    if params.W_z.shape[2] != params.b_z.shape[1]:
        raise ShapeError(f"output axis: W_z gives {params.W_z.shape[2]}, b_z gives {params.b_z.shape[1]}")
    A = adaptive_adjacency(params.E_A) if adjacency is None else adjacency
    lead = X.shape[:-2]
    X3 = ad.reshape(X, (-1,) + X.shape[-2:])
    H = X3 + ad.batched_matmul(A, X3)
    theta, bias = node_weights(params)
    # per-node weights: batch over nodes, [N, B, C_in] @ [N, C_in, C_out]
    Z = ad.transpose(ad.batched_matmul(ad.transpose(H, (1, 0, 2)), theta), (1, 0, 2)) + bias
    return ad.reshape(Z, lead + Z.shape[-2:])


def gcn_layer_stack(X_seq, layers: Sequence[AdaptiveGraphParams]) -> Tensor:
    """Apply the layers in order with ReLU between them (none after the last)."""
    if len(layers) < 1:
        raise ValueError("need at least one graph layer")
    h = X_seq
    for i, p in enumerate(layers):
        h = adaptive_gcn_forward(h, p)
        if i < len(layers) - 1:
            h = ad.relu(h)
    return h
