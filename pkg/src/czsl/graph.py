"""Composition graph over attribute, object, and composition nodes, plus the
graph-convolutional propagation that produces composition embeddings.

Node layout is [attributes | objects | compositions]. For every composition
y=(a,o) the three nodes of the triple are fully connected: y-a, y-o, and a-o.
Edges cover all closed-world compositions, seen and unseen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .data import EmbeddingTable, LabelSpace
from .errors import ConfigurationError


@dataclass(frozen=True)
class CompositionGraph:
    n_attrs: int
    n_objs: int
    n_comps: int
    adjacency: np.ndarray  # (N,N) binary symmetric, zero diagonal

    @property
    def n_nodes(self):
        return self.n_attrs + self.n_objs + self.n_comps

    @property
    def comp_offset(self):
        return self.n_attrs + self.n_objs

    @property
    def a_hat(self):
        """Adjacency with self-loops."""
        return self.adjacency + np.eye(self.n_nodes)

    @property
    def degrees(self):
        return self.a_hat.sum(axis=1)

    @property
    def propagation(self):
        """Row-normalized operator D^-1 (A + I); rows sum to 1."""
        a_hat = self.a_hat
        return a_hat / a_hat.sum(axis=1, keepdims=True)


def build_graph(space: LabelSpace) -> CompositionGraph:
    n_a, n_o, n_y = space.n_attrs, space.n_objs, space.n_comps
    n = n_a + n_o + n_y
    adj = np.zeros((n, n))
    for k, (a, o) in enumerate(space.compositions):
        ia, io, iy = a, n_a + o, n_a + n_o + k
        for u, v in ((iy, ia), (iy, io), (ia, io)):
            adj[u, v] = adj[v, u] = 1.0
    return CompositionGraph(n_attrs=n_a, n_objs=n_o, n_comps=n_y, adjacency=adj)


def init_node_embeddings(space: LabelSpace, table: EmbeddingTable) -> np.ndarray:
    """Initial node matrix: primitive rows copy their semantic embeddings, each
    composition row is the mean of its attribute and object rows."""
    if table.attributes.shape[0] != space.n_attrs or table.objects.shape[0] != space.n_objs:
        raise ConfigurationError("embedding table does not match the label space")
    comp_rows = np.stack(
        [(table.attributes[a] + table.objects[o]) / 2.0 for a, o in space.compositions]
    )
    return np.concatenate([table.attributes, table.objects, comp_rows], axis=0)


class LabelGraphConv(nn.Module):
    """Stacked D^-1(A+I) H W layers with ReLU between layers and a linear last
    layer (scores need signed embeddings). Weights have no bias terms."""

    def __init__(self, graph: CompositionGraph, dims, use_relu=True):
        super().__init__()
        if len(dims) < 2:
            raise ConfigurationError("need at least input and output dims")
        self.dims = tuple(dims)
        self.use_relu = use_relu
        # keep full precision; forward casts to the working dtype
        self.register_buffer("prop", torch.as_tensor(graph.propagation, dtype=torch.float64))
        self.weights = nn.ParameterList()
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            w = torch.empty(d_in, d_out)
            nn.init.xavier_uniform_(w)
            self.weights.append(nn.Parameter(w))

    def forward(self, h0):
        h = h0
        last = len(self.weights) - 1
        for i, w in enumerate(self.weights):
            h = self.prop.to(h.dtype) @ h @ w
            if self.use_relu and i < last:
                h = torch.relu(h)
        return h


def propagate(graph: CompositionGraph, h0, gcn: LabelGraphConv):
    """Run the GCN and return the composition-node rows (|Y|, C)."""
    return gcn(h0)[graph.comp_offset :]


def composition_scores(pooled, comp_embeddings):
    """Dot-product similarity: (B,C) x (|Y|,C) -> (B,|Y|)."""
    if pooled.shape[-1] != comp_embeddings.shape[-1]:
        raise ConfigurationError(
            f"pooled dim {pooled.shape[-1]} != embedding dim {comp_embeddings.shape[-1]}"
        )
    return pooled @ comp_embeddings.T
