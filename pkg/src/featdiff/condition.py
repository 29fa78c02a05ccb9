"""Table-conditioning branch: correlation graph -> GCN -> pooled condition.

Nodes are table columns; edge weights are |Pearson correlation| with
self-loops.  Node inputs are the 7 descriptive statistics used by the
collector state, z-scored across columns.  Two symmetric-normalized GCN
layers, mean pooling to a table embedding g, and a small MLP projection to
the condition vector c consumed by the denoiser's cross-attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .collector import _seven_stats

__all__ = ["FeatureGraph", "ConditionEmbedding", "ConditionNet", "build_graph", "gcn_layer"]


@dataclass(frozen=True)
class FeatureGraph:
    a_hat: np.ndarray  # (n, n) |corr| adjacency with unit diagonal
    norm_adj: np.ndarray  # D^-1/2 A D^-1/2
    h0: np.ndarray  # (n, 7) z-scored column statistics


@dataclass(frozen=True)
class ConditionEmbedding:
    g: torch.Tensor  # (B, d_g)
    c: torch.Tensor  # (B, d_c)


def build_graph(table: np.ndarray) -> FeatureGraph:
    """Fully connected feature-correlation graph with self-loops.

    Constant columns get correlation 0 to every other column (convention);
    the diagonal stays 1 so every degree is positive.
    """
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] < 2 or table.shape[1] < 1:
        raise ValueError("table must be 2-D with >=2 rows and >=1 column")
    n = table.shape[1]
    std = table.std(axis=0)
    a_hat = np.eye(n)
    live = std > 0
    if live.sum() >= 2:
        corr = np.corrcoef(table[:, live], rowvar=False)
        corr = np.nan_to_num(np.abs(corr), nan=0.0)
        np.fill_diagonal(corr, 1.0)
        idx = np.flatnonzero(live)
        a_hat[np.ix_(idx, idx)] = np.clip(corr, 0.0, 1.0)
    deg = a_hat.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(deg)
    norm_adj = a_hat * inv_sqrt[:, None] * inv_sqrt[None, :]

    h0 = _seven_stats(table, axis=0).T  # (n, 7)
    mean = h0.mean(axis=0)
    sd = h0.std(axis=0)
    sd[sd == 0] = 1.0
    h0 = (h0 - mean) / sd
    return FeatureGraph(a_hat=a_hat, norm_adj=norm_adj, h0=h0)


def gcn_layer(h: torch.Tensor, norm_adj: torch.Tensor, weight: torch.Tensor,
              activate: bool = True) -> torch.Tensor:
    """One symmetric-normalized graph convolution: ReLU(D^-1/2 A D^-1/2 H W)."""
    out = norm_adj @ h @ weight
    return torch.relu(out) if activate else out


class ConditionNet(nn.Module):
    """2-layer GCN + mean pooling + condition projection."""

    def __init__(self, hidden: int = 64, d_g: int = 64, d_c: int = 128):
        super().__init__()
        self.w1 = nn.Parameter(torch.empty(7, hidden))
        self.w2 = nn.Parameter(torch.empty(hidden, d_g))
        nn.init.xavier_uniform_(self.w1)
        nn.init.xavier_uniform_(self.w2)
        self.proj = nn.Sequential(nn.Linear(d_g, d_c), nn.ReLU(), nn.Linear(d_c, d_c))
        self.d_c = d_c

    def forward_graph(self, graph: FeatureGraph) -> ConditionEmbedding:
        adj = torch.as_tensor(graph.norm_adj, dtype=self.w1.dtype)
        h = torch.as_tensor(graph.h0, dtype=self.w1.dtype)
        h = gcn_layer(h, adj, self.w1)
        h = gcn_layer(h, adj, self.w2)
        g = h.mean(dim=0, keepdim=True)  # (1, d_g)
        return ConditionEmbedding(g=g, c=self.proj(g))

    def table_embedding(self, table: np.ndarray) -> ConditionEmbedding:
        return self.forward_graph(build_graph(table))
