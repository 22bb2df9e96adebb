"""Per-state spatial embedding via K-hop neighborhood aggregation.

Each state is encoded from its K-hop subgraph: node features are projected
to the hidden width, then each layer concatenates a node's vector with the
mean of its neighbors' vectors and applies a shared linear map + ReLU.
Aggregation order is canonical (sorted state ids) so results are bit-exactly
reproducible regardless of input ordering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import StateGraph
from .errors import DimensionMismatch, UnknownState


@dataclass(frozen=True)
class Subgraph:
    """Induced subgraph of all nodes within K hops of a center state."""

    nodes: tuple[str, ...]  # sorted
    center_index: int
    edges: tuple[tuple[int, int], ...]  # index pairs into nodes

    @property
    def center(self) -> str:
        return self.nodes[self.center_index]

    def neighbor_lists(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in self.nodes]
        for a, b in self.edges:
            out[a].append(b)
            out[b].append(a)
        return [sorted(v) for v in out]

    def aggregation_matrix(self) -> np.ndarray:
        """Row i holds 1/deg(i) over i's neighbors; isolated rows stay zero."""
        n = len(self.nodes)
        mat = np.zeros((n, n))
        neigh = self.neighbor_lists()
        for i, js in enumerate(neigh):
            if js:
                mat[i, js] = 1.0 / len(js)
        return mat


def khop_subgraph(graph: StateGraph, state: str, k: int) -> Subgraph:
    """All nodes within graph distance <= k of `state`, with induced edges."""
    if state not in graph.nodes:
        raise UnknownState(f"unknown state {state!r}")
    if k < 0:
        raise ValueError("k must be nonnegative")
    frontier = {state}
    seen = {state}
    for _ in range(k):
        nxt: set[str] = set()
        for node in frontier:
            nxt.update(graph.neighbors(node))
        frontier = nxt - seen
        seen |= frontier
    nodes = tuple(sorted(seen))
    index = {n: i for i, n in enumerate(nodes)}
    edges = tuple(
        sorted((index[a], index[b]) for a, b in graph.edges if a in seen and b in seen)
    )
    return Subgraph(nodes=nodes, center_index=index[state], edges=edges)


class SpatialEncoder(nn.Module):
    """Input projection followed by `k_hops` concat-aggregate layers.

    With k_hops=0 the output is just the linear projection of the center's
    features (no activation).
    """

    def __init__(self, in_channels: int, hidden_dim: int, k_hops: int = 1,
                 activation: str = "relu"):
        super().__init__()
        self.in_channels = in_channels
        self.hidden_dim = hidden_dim
        self.k_hops = k_hops
        self.activation = activation
        self.input_proj = nn.Linear(in_channels, hidden_dim)
        self.layers = nn.ModuleList(
            nn.Linear(2 * hidden_dim, hidden_dim) for _ in range(k_hops)
        )

    def _act(self, x: torch.Tensor) -> torch.Tensor:
        return torch.relu(x) if self.activation == "relu" else x

    def forward(self, feats: torch.Tensor, agg: torch.Tensor) -> torch.Tensor:
        """feats: (..., N, C); agg: (N, N) row-normalized neighbor means."""
        if feats.shape[-1] != self.in_channels:
            raise DimensionMismatch(
                f"expected {self.in_channels} channels, got {feats.shape[-1]}"
            )
        h = self.input_proj(feats)
        for layer in self.layers:
            neighbor_mean = agg @ h
            h = self._act(layer(torch.cat([h, neighbor_mean], dim=-1)))
        return h


def sage_layer(
    node_feats: dict[str, torch.Tensor],
    subgraph: Subgraph,
    layer: nn.Linear,
    activation: str = "relu",
) -> dict[str, torch.Tensor]:
    """One aggregation step over explicit per-node vectors.

    out_i = act(W [x_i || mean_{j in N(i)} x_j]); isolated nodes aggregate a
    zero vector. Neighbor means are computed in canonical node order.
    """
    dims = {v.shape[-1] for v in node_feats.values()}
    if len(dims) != 1:
        raise DimensionMismatch(f"inconsistent node feature widths: {sorted(dims)}")
    (d,) = dims
    if layer.in_features != 2 * d:
        raise DimensionMismatch(
            f"layer expects width {layer.in_features}, nodes have 2*{d}"
        )
    neigh = subgraph.neighbor_lists()
    out: dict[str, torch.Tensor] = {}
    for i, name in enumerate(subgraph.nodes):
        x = node_feats[name]
        if neigh[i]:
            stacked = torch.stack([node_feats[subgraph.nodes[j]] for j in neigh[i]])
            agg = stacked.sum(dim=0) / len(neigh[i])
        else:
            agg = torch.zeros_like(x)
        y = layer(torch.cat([x, agg], dim=-1))
        out[name] = torch.relu(y) if activation == "relu" else y
    return out


def encode_state(
    features: np.ndarray | torch.Tensor,
    graph: StateGraph,
    encoder: SpatialEncoder,
    state: str,
    state_order: tuple[str, ...],
) -> torch.Tensor:
    """Encode one state at one month from the full panel slice.

    `features` is (num_states, C) in `state_order`; returns the center's
    hidden vector after K layers.
    """
    sub = khop_subgraph(graph, state, encoder.k_hops)
    idx = [state_order.index(n) for n in sub.nodes]
    feats = torch.as_tensor(np.asarray(features)[idx], dtype=torch.float64)
    agg = torch.as_tensor(sub.aggregation_matrix(), dtype=torch.float64)
    h = encoder(feats, agg)
    return h[sub.center_index]
