"""Embedding table, GRU cell and dense layers.

All layer functions accept either a single vector or a matrix whose rows are
minibatch items; the math is identical row by row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import DimensionError, NumericError, Tensor

ACTIVATIONS = ("none", "relu", "softmax")


@dataclass
class EmbeddingTable:
    table: Tensor

    def __post_init__(self):
        v, d = self.table.shape
        if v < 4 or d < 1:
            raise ValueError(f"embedding table must be at least 4 x 1, got {self.table.shape}")

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]


@dataclass
class GruCell:
    W_xr: Tensor
    W_xu: Tensor
    W_xc: Tensor
    W_sr: Tensor
    W_su: Tensor
    W_sc: Tensor
    b_r: Tensor
    b_u: Tensor
    b_c: Tensor

    def __post_init__(self):
        n_in, h = self.W_xr.shape
        for w in (self.W_xu, self.W_xc):
            if w.shape != (n_in, h):
                raise DimensionError(f"input weights {w.shape} vs {(n_in, h)}")
        for w in (self.W_sr, self.W_su, self.W_sc):
            if w.shape != (h, h):
                raise DimensionError(f"hidden weights {w.shape} vs {(h, h)}")
        for b in (self.b_r, self.b_u, self.b_c):
            if b.shape != (h,):
                raise DimensionError(f"bias {b.shape} vs {(h,)}")

    @property
    def input_dim(self) -> int:
        return self.W_xr.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W_xr.shape[1]

    def parameters(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in
                ("W_xr", "W_xu", "W_xc", "W_sr", "W_su", "W_sc", "b_r", "b_u", "b_c")}


@dataclass
class DenseLayer:
    W: Tensor
    b: Tensor
    activation: str = "none"

    def __post_init__(self):
        if self.b.shape != (self.W.shape[1],):
            raise DimensionError(f"bias {self.b.shape} does not match weights {self.W.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]


def embed(table: EmbeddingTable, token_ids: Sequence[int]) -> Tensor:
    return T.take_rows(table.table, token_ids)


def _affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, W), b)


def gru_step(cell: GruCell, x: Tensor, s_prev: Tensor) -> Tensor:
    if x.shape[-1] != cell.input_dim:
        raise DimensionError(f"gru input width {x.shape[-1]} != {cell.input_dim}")
    if s_prev.shape[-1] != cell.hidden_dim:
        raise DimensionError(f"gru state width {s_prev.shape[-1]} != {cell.hidden_dim}")
    r = T.sigmoid(T.add(T.add(T.matmul(x, cell.W_xr), T.matmul(s_prev, cell.W_sr)), cell.b_r))
    u = T.sigmoid(T.add(T.add(T.matmul(x, cell.W_xu), T.matmul(s_prev, cell.W_su)), cell.b_u))
    c = T.tanh(T.add(T.add(T.matmul(x, cell.W_xc),
                           T.matmul(T.multiply(r, s_prev), cell.W_sc)), cell.b_c))
    return T.add(T.multiply(u, s_prev), T.multiply(T.one_minus(u), c))


def gru_unroll(cell: GruCell, inputs: Sequence[Tensor], s0: Tensor) -> list[Tensor]:
    states = []
    s = s0
    for x in inputs:
        s = gru_step(cell, x, s)
        states.append(s)
    return states


def dense(layer: DenseLayer, x: Tensor) -> Tensor:
    if x.shape[-1] != layer.in_dim:
        raise DimensionError(f"dense input width {x.shape[-1]} != {layer.in_dim}")
    z = _affine(x, layer.W, layer.b)
    if layer.activation == "relu":
        return T.relu(z)
    if layer.activation == "softmax":
        return T.softmax(z)
    return z


def l2_normalize(feature: np.ndarray) -> np.ndarray:
    """Scale each row to unit Euclidean norm."""
    norm = np.linalg.norm(feature, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise NumericError("cannot normalize a zero-norm image feature")
    return (feature / norm).astype(feature.dtype, copy=False)


def project_image(layer: DenseLayer, feature: Tensor, normalize: bool) -> Tensor:
    if normalize:
        feature = Tensor(l2_normalize(feature.data), dtype=feature.data.dtype)
    return dense(layer, feature)
