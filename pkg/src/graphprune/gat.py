"""Edge-featured graph attention encoder with global attention pooling.

Graphs are handled densely: a batch of observations of the same network is
stacked into node features ``[B, N, d]``, edge features ``[B, N, N, d_e]``
(entry ``[b, i, j]`` describes edge ``j -> i``) and an in-adjacency ``[N, N]``
that includes self loops.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import diffcore
from .errors import ShapeMismatchError
from .netmodel import GraphObservation

LEAKY_SLOPE = 0.2


def orthogonal_linear(d_in: int, d_out: int, rng: np.random.Generator, gain: float = 1.0, bias: bool = True) -> nn.Linear:
    lin = nn.Linear(d_in, d_out, bias=bias)
    with torch.no_grad():
        lin.weight.copy_(diffcore.orthogonal_init((d_out, d_in), gain, rng))
        if bias:
            lin.bias.zero_()
    return lin


class Mlp(nn.Module):
    """Linear -> LeakyReLU -> Linear."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, out_gain: float = 1.0):
        super().__init__()
        self.hidden = orthogonal_linear(d_in, d_hidden, rng, gain=math.sqrt(2.0))
        self.out = orthogonal_linear(d_hidden, d_out, rng, gain=out_gain)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.out(diffcore.leaky_relu(self.hidden(x), LEAKY_SLOPE))


@dataclass
class DenseGraph:
    x: torch.Tensor  # [B, N, d]
    e: torch.Tensor  # [B, N, N, d_e]
    adj: torch.Tensor  # [N, N] bool, self loops included

    @property
    def batch(self) -> int:
        return self.x.shape[0]


def stack_observations(observations: Sequence[GraphObservation], dtype=None) -> DenseGraph:
    """Batch observations that share a topology."""
    dtype = dtype or torch.get_default_dtype()
    first = observations[0]
    for obs in observations[1:]:
        if obs.node_features.shape != first.node_features.shape or not np.array_equal(obs.edge_index, first.edge_index):
            raise ShapeMismatchError("observations in a batch must share one graph topology")
    x = torch.tensor(np.stack([o.node_features for o in observations]), dtype=dtype)
    e = torch.tensor(np.stack([o.dense_edges() for o in observations]), dtype=dtype)
    adj = torch.tensor(first.in_adjacency())
    return DenseGraph(x, e, adj)


class GatLayer(nn.Module):
    def __init__(self, d_in: int, d_out: int, d_edge: int, rng: np.random.Generator, slope: float = LEAKY_SLOPE):
        super().__init__()
        self.d_in, self.d_out, self.d_edge = d_in, d_out, d_edge
        self.slope = slope
        self.theta_s = nn.Parameter(diffcore.orthogonal_init((d_in, d_out), 1.0, rng))
        self.theta_t = nn.Parameter(diffcore.orthogonal_init((d_in, d_out), 1.0, rng))
        self.theta_e = nn.Parameter(diffcore.orthogonal_init((d_edge, d_out), 1.0, rng))
        self.a = nn.Parameter(torch.tensor(rng.standard_normal(d_out) / math.sqrt(d_out), dtype=torch.get_default_dtype()))

    def _check(self, x, e, adj):
        b, n, d = x.shape
        if d != self.d_in or tuple(e.shape) != (b, n, n, self.d_edge) or tuple(adj.shape) != (n, n):
            raise ShapeMismatchError(
                f"gat layer expects x[B,N,{self.d_in}], e[B,N,N,{self.d_edge}], adj[N,N]; "
                f"got {tuple(x.shape)}, {tuple(e.shape)}, {tuple(adj.shape)}"
            )

    def attention(self, x: torch.Tensor, e: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        """Coefficients ``[B, N, N]``; row ``i`` is a distribution over N(i) and i."""
        self._check(x, e, adj)
        src = diffcore.matmul(x, self.theta_s)  # [B, N, d_out]
        tgt = diffcore.matmul(x, self.theta_t)
        edge = diffcore.matmul(e, self.theta_e)  # [B, N, N, d_out]
        h = diffcore.leaky_relu(src[:, :, None, :] + tgt[:, None, :, :] + edge, self.slope)
        scores = (h * self.a).sum(-1)
        return diffcore.softmax(scores, axis=-1, mask=adj)

    def forward(self, x: torch.Tensor, e: torch.Tensor, adj: torch.Tensor) -> torch.Tensor:
        alpha = self.attention(x, e, adj)
        eye = torch.eye(x.shape[1], dtype=torch.bool)
        self_w = alpha.diagonal(dim1=1, dim2=2)  # [B, N]
        neigh = alpha.masked_fill(eye, 0.0)
        src = diffcore.matmul(x, self.theta_s)
        tgt = diffcore.matmul(x, self.theta_t)
        return self_w[..., None] * src + neigh @ tgt


class GatEncoder(nn.Module):
    """Stacked GAT rounds followed by softmax-gated global pooling.

    Input features are divided by per-slot scales (buffers fitted with
    :meth:`fit_scaler`) so counts, ratios and l1 norms share a range.
    """

    def __init__(
        self,
        d_node: int,
        d_edge: int,
        rng: np.random.Generator,
        hidden: int = 128,
        d_emb: int = 128,
        rounds: int = 3,
    ):
        super().__init__()
        self.d_node, self.d_edge, self.hidden, self.d_emb = d_node, d_edge, hidden, d_emb
        dims = [d_node] + [hidden] * rounds
        self.layers = nn.ModuleList(GatLayer(dims[k], dims[k + 1], d_edge, rng) for k in range(rounds))
        self.gate = Mlp(hidden, hidden, 1, rng)
        self.proj = Mlp(hidden, hidden, d_emb, rng)
        self.register_buffer("node_scale", torch.ones(d_node))
        self.register_buffer("edge_scale", torch.ones(d_edge))

    def fit_scaler(self, observations: Sequence[GraphObservation]) -> None:
        x = np.concatenate([o.node_features for o in observations])
        e = np.concatenate([o.edge_features for o in observations])
        with torch.no_grad():
            self.node_scale.copy_(torch.tensor(_slot_scale(x)))
            self.edge_scale.copy_(torch.tensor(_slot_scale(e)))

    def scale(self, graph: DenseGraph) -> tuple[torch.Tensor, torch.Tensor]:
        return graph.x / self.node_scale, graph.e / self.edge_scale

    def node_embeddings(self, graph: DenseGraph) -> torch.Tensor:
        x, e = self.scale(graph)
        for k, layer in enumerate(self.layers):
            x = layer(x, e, graph.adj)
            if k < len(self.layers) - 1:
                x = diffcore.leaky_relu(x, LEAKY_SLOPE)
        return x

    def pool(self, nodes: torch.Tensor) -> torch.Tensor:
        weights = diffcore.softmax(self.gate(nodes).squeeze(-1), axis=-1)  # [B, N]
        return (weights[..., None] * self.proj(nodes)).sum(1)

    def forward(self, graph: DenseGraph) -> tuple[torch.Tensor, torch.Tensor]:
        nodes = self.node_embeddings(graph)
        return nodes, self.pool(nodes)


def _slot_scale(values: np.ndarray) -> np.ndarray:
    peak = np.abs(values).max(axis=0).astype(np.float64)
    peak[peak == 0] = 1.0
    return peak
