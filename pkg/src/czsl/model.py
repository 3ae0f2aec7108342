"""Assembly of the three-branch recognizer.

Pipeline per image: frozen backbone -> aligned multi-level rows -> mixing
weights -> one mixed feature map per branch -> pooled vector per branch ->
attribute/object classifier heads and dot-product composition scores against
GCN-propagated label embeddings. Inference adds the three score sets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .aggregation import BRANCHES, STRATEGIES, AggregationPredictor, aggregate, mixing_weights
from .backbone import BackboneConfig, FeatureAligner, StagedBackbone
from .data import EmbeddingTable, LabelSpace
from .errors import ConfigurationError
from .graph import LabelGraphConv, build_graph, init_node_embeddings, propagate
from .pooling import AttentionPool, gap_pool

POOLINGS = ("attention", "gap")
FUSE_MODES = ("sum", "softmax")


@dataclass
class ModelConfig:
    image_size: int = 64
    stage_channels: tuple = (16, 32, 64, 128)
    predictor_channels: tuple = (16, 32, 64)
    target_channels: int = 128
    levels: tuple = (1, 2, 3)
    embed_dim: int = 64
    gcn_hidden: int = 128
    gcn_layers: int = 2
    head_hidden: int = 0  # 0 -> 2 * target_channels
    pool_heads: int = 1
    strategy: str = "learned"
    pooling: str = "attention"
    tau: float = 16.0
    freeze_node_init: bool = False
    backbone_kind: str = "desk"

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.predictor_channels = tuple(self.predictor_channels)
        self.levels = tuple(sorted(self.levels))
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy '{self.strategy}'")
        if self.pooling not in POOLINGS:
            raise ConfigurationError(f"unknown pooling '{self.pooling}'")
        if self.tau <= 0:
            raise ConfigurationError(f"temperature must be > 0, got {self.tau}")
        if self.gcn_layers < 1:
            raise ConfigurationError("gcn_layers must be >= 1")
        if self.head_hidden == 0:
            self.head_hidden = 2 * self.target_channels

    def backbone_config(self, seed):
        return BackboneConfig(
            kind=self.backbone_kind,
            input_size=self.image_size,
            stage_channels=self.stage_channels,
            target_channels=self.target_channels,
            levels=self.levels,
            seed=seed,
        )

    def gcn_dims(self):
        return (
            [self.embed_dim]
            + [self.gcn_hidden] * (self.gcn_layers - 1)
            + [self.target_channels]
        )


class MLPHead(nn.Module):
    """Linear -> BatchNorm -> ReLU -> Linear classifier."""

    def __init__(self, in_dim, hidden, out_dim):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, hidden),
            nn.BatchNorm1d(hidden),
            nn.ReLU(),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, x):
        return self.net(x)


@dataclass
class ForwardResult:
    """Branch scores plus the intermediates the focus loss differentiates."""

    attr_scores: torch.Tensor
    obj_scores: torch.Tensor
    comp_scores: torch.Tensor
    attr_feature: torch.Tensor
    comp_feature: torch.Tensor
    obj_feature: torch.Tensor
    weights: torch.Tensor
    comp_embeddings: torch.Tensor

    def branch_scores(self, branch):
        return {
            "attribute": self.attr_scores,
            "composition": self.comp_scores,
            "object": self.obj_scores,
        }[branch]

    def branch_feature(self, branch):
        return {
            "attribute": self.attr_feature,
            "composition": self.comp_feature,
            "object": self.obj_feature,
        }[branch]


class ThreeBranchNet(nn.Module):
    """The full recognizer. Construction is deterministic given (label space,
    embeddings, config, seed); the backbone stays frozen for its lifetime."""

    def __init__(self, space: LabelSpace, embeddings: EmbeddingTable, config: ModelConfig,
                 seed=0, backbone_stages=None):
        super().__init__()
        if embeddings.dim != config.embed_dim:
            raise ConfigurationError(
                f"embedding dim {embeddings.dim} != configured {config.embed_dim}"
            )
        self.space = space
        self.config = config
        self.seed = seed
        self.graph = build_graph(space)
        grid = config.backbone_config(seed).grid_size()
        self.grid = grid

        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.backbone = StagedBackbone(config.backbone_config(seed), stages=backbone_stages)
            self.aligner = FeatureAligner(
                self.backbone.config.level_channels(), config.target_channels, grid
            )
            self.predictor = AggregationPredictor(
                n_levels=len(config.levels), stage_channels=config.predictor_channels
            )
            if config.pooling == "attention":
                self.pools = nn.ModuleDict(
                    {
                        b: AttentionPool(config.target_channels, grid, config.pool_heads)
                        for b in BRANCHES
                    }
                )
            else:
                self.pools = None
            self.attr_head = MLPHead(config.target_channels, config.head_hidden, space.n_attrs)
            self.obj_head = MLPHead(config.target_channels, config.head_hidden, space.n_objs)
            h0 = init_node_embeddings(space, embeddings)
            self.node_embeddings = nn.Parameter(
                torch.as_tensor(h0, dtype=torch.get_default_dtype()),
                requires_grad=not config.freeze_node_init,
            )
            self.gcn = LabelGraphConv(self.graph, config.gcn_dims())

        self.register_buffer("comp_attr", torch.as_tensor(space.comp_attr))
        self.register_buffer("comp_obj", torch.as_tensor(space.comp_obj))

    def pool(self, branch, feature):
        if self.pools is None:
            return gap_pool(feature)
        return self.pools[branch](feature)

    def composition_embeddings(self):
        return propagate(self.graph, self.node_embeddings, self.gcn)

    def forward(self, images, sample_indices=None, draw_key=0) -> ForwardResult:
        feats = self.backbone(images)
        aligned = self.aligner(feats)
        w = mixing_weights(
            images,
            self.predictor,
            self.config.tau,
            strategy=self.config.strategy,
            seed=self.seed,
            sample_indices=sample_indices,
            draw_key=draw_key,
        )
        mixed = aggregate(w, aligned)
        c, g = self.config.target_channels, self.grid
        f_attr = mixed[:, 0].reshape(-1, c, g, g)
        f_comp = mixed[:, 1].reshape(-1, c, g, g)
        f_obj = mixed[:, 2].reshape(-1, c, g, g)

        pooled_attr = self.pool("attribute", f_attr)
        pooled_comp = self.pool("composition", f_comp)
        pooled_obj = self.pool("object", f_obj)

        comp_embed = self.composition_embeddings()
        return ForwardResult(
            attr_scores=self.attr_head(pooled_attr),
            obj_scores=self.obj_head(pooled_obj),
            comp_scores=pooled_comp @ comp_embed.T,
            attr_feature=f_attr,
            comp_feature=f_comp,
            obj_feature=f_obj,
            weights=w,
            comp_embeddings=comp_embed,
        )


def fuse_scores(attr_scores, obj_scores, comp_scores, space: LabelSpace, mode="sum"):
    """Total composition scores: S[y] = S_c[y] + S_a[y_a] + S_o[y_o].

    ``softmax`` mode normalizes each branch to probabilities before adding
    (off the default path; plain addition is the published rule).
    """
    if mode not in FUSE_MODES:
        raise ConfigurationError(f"unknown fuse mode '{mode}'")
    if mode == "softmax":
        attr_scores = torch.softmax(attr_scores, dim=-1)
        obj_scores = torch.softmax(obj_scores, dim=-1)
        comp_scores = torch.softmax(comp_scores, dim=-1)
    ca = torch.as_tensor(space.comp_attr, device=attr_scores.device)
    co = torch.as_tensor(space.comp_obj, device=attr_scores.device)
    return comp_scores + attr_scores[:, ca] + obj_scores[:, co]
