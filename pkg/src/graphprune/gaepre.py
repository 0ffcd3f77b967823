"""Self-supervised warm start for the GAT encoder.

A graph autoencoder reconstructs the directed adjacency (bilinear scorer),
node features and edge features from the encoder's node embeddings.  The
training corpus is every intermediate observation of random-action episodes.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import diffcore
from .env import EnvConfig, PruningEnv, calibrate
from .errors import EmptyDatasetError, NonFiniteLossError, ShapeMismatchError
from .gat import DenseGraph, GatEncoder, Mlp, stack_observations
from .netmodel import GraphObservation, NetworkSpec

log = logging.getLogger(__name__)


class DecoderHeads(nn.Module):
    def __init__(self, d_hidden: int, d_node: int, d_edge: int, rng: np.random.Generator):
        super().__init__()
        self.bilinear = nn.Parameter(diffcore.orthogonal_init((d_hidden, d_hidden), 1.0 / np.sqrt(d_hidden), rng))
        self.adj_bias = nn.Parameter(torch.zeros(()))
        self.node = Mlp(d_hidden, d_hidden, d_node, rng)
        self.edge = Mlp(2 * d_hidden, d_hidden, d_edge, rng)

    def adjacency_logits(self, z: torch.Tensor) -> torch.Tensor:
        """``[B, N, N]`` scores; entry ``[b, i, j]`` rates an edge ``i -> j``."""
        return z @ self.bilinear @ z.transpose(1, 2) + self.adj_bias

    def edge_features(self, z: torch.Tensor, edge_index: np.ndarray) -> torch.Tensor:
        src, dst = edge_index[:, 0], edge_index[:, 1]
        return self.edge(diffcore.concat([z[:, src], z[:, dst]], axis=-1))


@dataclass
class PretrainConfig:
    episodes: int = 200
    lr: float = 1e-3
    batch_graphs: int = 32
    epochs: int = 30
    seed: int = 0


@dataclass
class Reconstruction:
    total: torch.Tensor
    adj: torch.Tensor
    feat: torch.Tensor
    edge: torch.Tensor

    def floats(self) -> tuple[float, float, float, float]:
        return float(self.total.detach()), float(self.adj.detach()), float(self.feat.detach()), float(self.edge.detach())


def adjacency_target(edge_index: np.ndarray, n: int, dtype=None) -> torch.Tensor:
    a = torch.zeros(n, n, dtype=dtype or torch.get_default_dtype())
    if len(edge_index):
        a[edge_index[:, 0], edge_index[:, 1]] = 1.0
    return a


def reconstruction_loss(encoder: GatEncoder, heads: DecoderHeads, graph: DenseGraph, edge_index: np.ndarray) -> Reconstruction:
    """Per-graph reconstruction losses averaged over the batch.

    Adjacency is a BCE summed over all ordered node pairs; node and edge terms
    are squared errors against the scaled inputs the encoder sees.
    """
    b, n, d = graph.x.shape
    if d != encoder.d_node:
        raise ShapeMismatchError(f"node features have {d} slots, encoder expects {encoder.d_node}")
    x_scaled, e_scaled = encoder.scale(graph)
    z = encoder.node_embeddings(graph)
    target = adjacency_target(edge_index, n, z.dtype).expand(b, n, n)
    l_adj = diffcore.bce_with_logits(heads.adjacency_logits(z), target) / b
    l_feat = ((heads.node(z) - x_scaled) ** 2).sum() / b
    if len(edge_index):
        e_true = e_scaled[:, edge_index[:, 1], edge_index[:, 0]]  # dense entry [dst, src]
        l_edge = ((heads.edge_features(z, edge_index) - e_true) ** 2).sum() / b
    else:
        l_edge = z.sum() * 0.0
    return Reconstruction(l_adj + l_feat + l_edge, l_adj, l_feat, l_edge)


def collect_random_episodes(
    net: NetworkSpec, env_config: EnvConfig, oracle, episodes: int, rng: np.random.Generator, calibration=None
) -> list[GraphObservation]:
    """Observations seen before every step of uniformly random episodes."""
    calibration = calibration or calibrate(oracle)
    env = PruningEnv(net, env_config, oracle, calibration=calibration, defer_reward=True)
    corpus = []
    for _ in range(episodes):
        obs = env.reset()
        done = False
        while not done:
            corpus.append(obs)
            group = env.groups[env.state.group_cursor]
            obs, _, done = env.step(rng.random(len(group)) < 0.5)
    return corpus


def pretrain(
    encoder: GatEncoder,
    heads: DecoderHeads,
    corpus: Sequence[GraphObservation],
    config: PretrainConfig,
    fit_scaler: bool = True,
) -> list[dict]:
    """Adam on the reconstruction loss; returns one record per optimisation step."""
    if not corpus:
        raise EmptyDatasetError("pretraining corpus is empty")
    if fit_scaler:
        encoder.fit_scaler(corpus)
    rng = np.random.default_rng(config.seed)
    params = list(encoder.parameters()) + list(heads.parameters())
    opt = diffcore.Adam(params, lr=config.lr)
    edge_index = corpus[0].edge_index
    graphs = stack_observations(corpus)
    curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(corpus))
        for start in range(0, len(order), config.batch_graphs):
            idx = torch.tensor(order[start : start + config.batch_graphs])
            batch = DenseGraph(graphs.x[idx], graphs.e[idx], graphs.adj)
            rec = reconstruction_loss(encoder, heads, batch, edge_index)
            if not torch.isfinite(rec.total):
                raise NonFiniteLossError(f"non-finite reconstruction loss at step {len(curve)}", minibatch=start)
            opt.step(diffcore.backward(rec.total, params))
            total, adj, feat, edge = rec.floats()
            curve.append({"step": len(curve), "L_recon": total, "L_adj": adj, "L_feat": feat, "L_edge": edge})
        log.info("pretrain epoch %d loss %.4f", epoch, curve[-1]["L_recon"])
    return curve


@torch.no_grad()
def corpus_loss(encoder: GatEncoder, heads: DecoderHeads, corpus: Sequence[GraphObservation]) -> float:
    return float(reconstruction_loss(encoder, heads, stack_observations(corpus), corpus[0].edge_index).total)


def write_curve(path, curve: Sequence[dict]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "L_recon", "L_adj", "L_feat", "L_edge"])
        for r in curve:
            w.writerow([r["step"], f"{r['L_recon']:.6g}", f"{r['L_adj']:.6g}", f"{r['L_feat']:.6g}", f"{r['L_edge']:.6g}"])
