"""Graph encoders and linear classification heads.

Two message-passing backbones share one interface: each layer is a linear
map of aggregated node features, ReLU between layers, nothing after the
last. ``encode`` takes the preprocessing operator that matches the backbone
(symmetric normalized adjacency for gcn, row-mean neighbor aggregator for
sage), so the forward pass itself is backbone-agnostic about graph wiring.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import SparseMatrix, Tensor

BACKBONES = ("gcn", "sage")
HEAD_ROLES = ("old", "novel", "joint")


@dataclass
class EncoderParams:
    backbone: str
    dims: list[int]            # [input, hidden, ..., repr]
    weights: list[Tensor]
    biases: list[Tensor]

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def repr_dim(self) -> int:
        return self.dims[-1]


@dataclass
class HeadParams:
    role: str
    weight: Tensor             # (repr_dim, num_outputs)
    bias: Tensor               # (1, num_outputs)

    @property
    def num_outputs(self) -> int:
        return self.weight.shape[1]


def glorot(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def init_encoder(backbone: str, dims: list[int], seed: int = 0) -> EncoderParams:
    """Glorot-uniform weights, zero biases. dims[0] is the feature width."""
    if backbone not in BACKBONES:
        raise ValueError(f"unknown backbone {backbone!r}, pick from {BACKBONES}")
    if len(dims) < 2:
        raise ValueError("encoder needs at least one layer")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        rows = 2 * d_in if backbone == "sage" else d_in
        weights.append(ad.parameter(glorot(rows, d_out, rng)))
        biases.append(ad.parameter(np.zeros((1, d_out))))
    return EncoderParams(backbone=backbone, dims=list(dims), weights=weights, biases=biases)


def encoder_parameters(enc: EncoderParams) -> list[Tensor]:
    return list(enc.weights) + list(enc.biases)


def freeze_encoder(enc: EncoderParams) -> EncoderParams:
    """Deep copy with gradients off; used as the distillation anchor."""
    return EncoderParams(
        backbone=enc.backbone,
        dims=list(enc.dims),
        weights=[ad.constant(w.data.copy()) for w in enc.weights],
        biases=[ad.constant(b.data.copy()) for b in enc.biases],
    )


def encode(enc: EncoderParams, adj: SparseMatrix, x: Tensor) -> Tensor:
    """Full-graph forward pass to representations, shape (N, repr_dim)."""
    if adj.shape[0] != x.shape[0]:
        raise ValueError(f"operator is {adj.shape} but features have {x.shape[0]} rows")
    if x.shape[1] != enc.dims[0]:
        raise ValueError(f"encoder expects {enc.dims[0]} input features, got {x.shape[1]}")
    h = x
    last = enc.num_layers - 1
    for i, (w, b) in enumerate(zip(enc.weights, enc.biases)):
        if enc.backbone == "gcn":
            h = ad.add(ad.spmm(adj, ad.matmul(h, w)), b)
        else:  # sage: concat self with mean of neighbors, then linear
            h = ad.add(ad.matmul(ad.concat_rows(h, ad.spmm(adj, h)), w), b)
        if i != last:
            h = ad.relu(h)
    return h


def init_head(repr_dim: int, num_outputs: int, role: str, seed: int = 0) -> HeadParams:
    if role not in HEAD_ROLES:
        raise ValueError(f"unknown head role {role!r}, pick from {HEAD_ROLES}")
    if num_outputs < 1:
        raise ValueError("head needs at least one output")
    rng = np.random.default_rng(seed)
    return HeadParams(role=role,
                      weight=ad.parameter(glorot(repr_dim, num_outputs, rng)),
                      bias=ad.parameter(np.zeros((1, num_outputs))))


def head_parameters(head: HeadParams) -> list[Tensor]:
    return [head.weight, head.bias]


def head_forward(head: HeadParams, z: Tensor) -> Tensor:
    if z.shape[1] != head.weight.shape[0]:
        raise ValueError(
            f"head expects {head.weight.shape[0]}-dim representations, got {z.shape[1]}")
    return ad.add(ad.matmul(z, head.weight), head.bias)


def extend_head(old: HeadParams, num_new: int, init_scale: float = 0.01,
                seed: int = 0) -> HeadParams:
    """Joint head over old + new outputs.

    Old columns are copied verbatim so the joint head starts with the
    pretrained old-class behavior; new columns are N(0, init_scale^2) with
    zero bias.
    """
    if num_new < 1:
        raise ValueError("extend_head needs at least one new output")
    rng = np.random.default_rng(seed)
    d, c_old = old.weight.shape
    w = np.zeros((d, c_old + num_new))
    w[:, :c_old] = old.weight.data
    w[:, c_old:] = init_scale * rng.standard_normal((d, num_new))
    b = np.zeros((1, c_old + num_new))
    b[0, :c_old] = old.bias.data[0]
    return HeadParams(role="joint", weight=ad.parameter(w), bias=ad.parameter(b))
