"""Parameterised building blocks: linear, GraphSAGE, GCN, LSTM cell and gated temporal convolution."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geodesy import WeightedGraph


def init_uniform(rng: np.random.Generator, shape, fan_in: int, name: str | None = None) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros(shape, name: str | None = None) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


class Layer:
    """Mixin: every dataclass field is a parameter tensor."""

    def parameters(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class LinearLayer(Layer):
    W: Tensor  # (out, in)
    b: Tensor  # (out,)

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "LinearLayer":
        return cls(init_uniform(rng, (n_out, n_in), n_in), zeros(n_out))


def linear_forward(x: Tensor, layer: LinearLayer) -> Tensor:
    return ad.add(ad.matmul_nt(x, layer.W), ad.expand_rows(layer.b, x.shape[0]))


@dataclass
class SageLayer(Layer):
    W1: Tensor  # (out, in), applied to the node itself
    W2: Tensor  # (out, in), applied to the neighbour mean

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "SageLayer":
        return cls(init_uniform(rng, (n_out, n_in), n_in), init_uniform(rng, (n_out, n_in), n_in))


def neighbour_weights(graph: WeightedGraph, weighted: bool = True, sample_k: int | None = None,
                      rng: np.random.Generator | None = None) -> np.ndarray:
    """Row-stochastic aggregation matrix over N(i) = every j != i.

    With ``sample_k`` each node keeps only ``k`` randomly chosen neighbours.
    """
    n = graph.n_nodes
    if n < 2:
        raise ValueError("neighbour mean needs at least 2 nodes")
    if sample_k is None and weighted:
        return graph.row_normalized
    W = graph.weights.copy() if weighted else np.ones((n, n)) - np.eye(n)
    if sample_k is not None and sample_k < n - 1:
        rng = rng if rng is not None else np.random.default_rng(0)
        mask = np.zeros((n, n), dtype=bool)
        for i in range(n):
            others = np.delete(np.arange(n), i)
            mask[i, rng.choice(others, size=sample_k, replace=False)] = True
        W = np.where(mask, W, 0.0)
    return W / W.sum(axis=1, keepdims=True)


def sage_forward(x: Tensor, graph: WeightedGraph, layer: SageLayer, weighted: bool = True,
                 sample_k: int | None = None, rng: np.random.Generator | None = None) -> Tensor:
    """x'_i = W1 x_i + W2 * mean_{j in N(i)} x_j, with an edge-weighted mean by default."""
    if x.shape[0] != graph.n_nodes:
        raise ad.ShapeMismatch(f"sage_forward: {x.shape[0]} feature rows for {graph.n_nodes} nodes")
    agg = ad.weighted_mean(x, neighbour_weights(graph, weighted, sample_k, rng), normalized=True)
    return ad.add(ad.matmul_nt(x, layer.W1), ad.matmul_nt(agg, layer.W2))


@dataclass
class GcnLayer(Layer):
    W: Tensor  # (out, in)
    b: Tensor  # (out,)

    @classmethod
    def init(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "GcnLayer":
        return cls(init_uniform(rng, (n_out, n_in), n_in), zeros(n_out))


def gcn_forward(x: Tensor, graph: WeightedGraph, layer: GcnLayer) -> Tensor:
    """D^-1/2 (A + I) D^-1/2 X W^T + b."""
    if x.shape[0] != graph.n_nodes:
        raise ad.ShapeMismatch(f"gcn_forward: {x.shape[0]} feature rows for {graph.n_nodes} nodes")
    prop = ad.weighted_mean(x, graph.sym_normalized, normalized=True)
    return linear_forward(prop, LinearLayer(layer.W, layer.b))


GATES = ("i", "f", "g", "o")


@dataclass
class LstmCell(Layer):
    """Gate blocks are stacked in i, f, g, o order along the first axis."""

    W: Tensor  # (4H, in)
    U: Tensor  # (4H, H)
    b: Tensor  # (4H,)

    @property
    def hidden(self) -> int:
        return self.U.shape[1]

    @classmethod
    def init(cls, n_in: int, hidden: int, rng: np.random.Generator) -> "LstmCell":
        return cls(
            init_uniform(rng, (4 * hidden, n_in), n_in),
            init_uniform(rng, (4 * hidden, hidden), hidden),
            zeros(4 * hidden),
        )

    def gate(self, which: str) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Raw (W, U, b) arrays of one gate."""
        k = GATES.index(which)
        H = self.hidden
        s = slice(k * H, (k + 1) * H)
        return self.W.data[s], self.U.data[s], self.b.data[s]


def lstm_step(x: Tensor, h: Tensor, c: Tensor, cell: LstmCell) -> tuple[Tensor, Tensor]:
    H = cell.hidden
    pre = ad.add(ad.matmul_nt(x, cell.W), ad.matmul_nt(h, cell.U))
    pre = ad.add(pre, ad.expand_rows(cell.b, x.shape[0]))
    i = ad.sigmoid(ad.columns(pre, 0, H))
    f = ad.sigmoid(ad.columns(pre, H, 2 * H))
    g = ad.tanh(ad.columns(pre, 2 * H, 3 * H))
    o = ad.sigmoid(ad.columns(pre, 3 * H, 4 * H))
    c_new = ad.add(ad.hadamard(f, c), ad.hadamard(i, g))
    h_new = ad.hadamard(o, ad.tanh(c_new))
    return h_new, c_new


@dataclass
class TemporalConvBlock(Layer):
    K_P: Tensor  # (Kt, C_in, C_out)
    b_P: Tensor
    K_Q: Tensor
    b_Q: Tensor
    K_R: Tensor
    b_R: Tensor

    @property
    def kt(self) -> int:
        return self.K_P.shape[0]

    @classmethod
    def init(cls, c_in: int, c_out: int, kt: int, rng: np.random.Generator) -> "TemporalConvBlock":
        fan_in = kt * c_in
        parts = []
        for _ in range(3):
            parts += [init_uniform(rng, (kt, c_in, c_out), fan_in), zeros(c_out)]
        return cls(*parts)


def temporal_conv_forward(x: Tensor, block: TemporalConvBlock) -> Tensor:
    """ReLU(P * sigmoid(Q) + R) with P, Q, R three time convolutions of ``x``."""
    if x.shape[0] < block.kt:
        raise ad.ShapeMismatch(f"temporal_conv_forward: T={x.shape[0]} < Kt={block.kt}")
    p = ad.conv_time(x, block.K_P, block.b_P)
    q = ad.conv_time(x, block.K_Q, block.b_Q)
    r = ad.conv_time(x, block.K_R, block.b_R)
    return ad.relu(ad.add(ad.hadamard(p, ad.sigmoid(q)), r))
