"""Frozen multi-stage feature extractor and the trainable level aligner.

The desk backbone is a 4-stage stride-2 CNN with seeded random weights that
never train; level k is the output of stage k. The aligner pools every active
level to the highest level's grid and maps channels to a common width with
1x1 convolutions (these do train).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError

DESK_STAGE_CHANNELS = (16, 32, 64, 128)
PAPER_TARGET_CHANNELS = 512  # published setting; desk default stays small


@dataclass
class BackboneConfig:
    kind: str = "desk"  # "desk" | "external"
    input_size: int = 64
    stage_channels: tuple = DESK_STAGE_CHANNELS
    target_channels: int = 128
    levels: tuple = (1, 2, 3)
    seed: int = 0

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.levels = tuple(sorted(self.levels))
        if self.kind not in ("desk", "external"):
            raise ConfigurationError(f"unknown backbone kind '{self.kind}'")
        if not self.levels:
            raise ConfigurationError("at least one feature level must be active")
        if any(l < 0 or l >= len(self.stage_channels) for l in self.levels):
            raise ConfigurationError(f"levels {self.levels} outside stage range")
        if self.input_size < 2 ** len(self.stage_channels):
            raise ConfigurationError(
                f"input_size {self.input_size} too small for "
                f"{len(self.stage_channels)} stride-2 stages"
            )

    def grid_size(self, level=None):
        """Spatial width/height of a stage output (highest active by default)."""
        if level is None:
            level = max(self.levels)
        return self.input_size // (2 ** (level + 1))

    def level_channels(self):
        return tuple(self.stage_channels[l] for l in self.levels)


def _make_desk_stages(stage_channels, seed):
    gen = torch.Generator().manual_seed(seed)
    stages = nn.ModuleList()
    in_ch = 3
    for out_ch in stage_channels:
        conv = nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1)
        fan_in = in_ch * 9
        with torch.no_grad():
            conv.weight.copy_(
                torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / fan_in)
            )
            conv.bias.zero_()
        stages.append(nn.Sequential(conv, nn.ReLU()))
        in_ch = out_ch
    return stages


class StagedBackbone(nn.Module):
    """Sequential stride-2 stages; all parameters frozen. Pure given weights."""

    def __init__(self, config: BackboneConfig, stages=None):
        super().__init__()
        self.config = config
        if config.kind == "desk":
            if stages is not None:
                raise ConfigurationError("desk backbone builds its own stages")
            stages = _make_desk_stages(config.stage_channels, config.seed)
        else:
            if stages is None:
                raise ConfigurationError("external backbone requires stage modules")
            stages = nn.ModuleList(stages)
        if len(stages) != len(config.stage_channels):
            raise ConfigurationError(
                f"{len(stages)} stages but {len(config.stage_channels)} stage widths"
            )
        self.stages = stages
        for p in self.stages.parameters():
            p.requires_grad_(False)

    def forward(self, images):
        """images (B,3,S,S) -> list of per-level feature maps, low to high."""
        b = images.shape[0] if images.dim() == 4 else None
        if images.dim() != 4 or images.shape[1] != 3 or images.shape[2] != self.config.input_size \
                or images.shape[3] != self.config.input_size:
            raise ConfigurationError(
                f"expected images (B,3,{self.config.input_size},{self.config.input_size}), "
                f"got {tuple(images.shape)}"
            )
        feats = []
        h = images
        for stage in self.stages:
            h = stage(h)
            feats.append(h)
        return [feats[l] for l in self.config.levels]


class FeatureAligner(nn.Module):
    """Pool every level to the top grid, 1x1-conv to a common channel width,
    and stack the flattened results as rows (B, n_levels, C*H*W). Trainable."""

    def __init__(self, level_channels, target_channels, grid):
        super().__init__()
        self.grid = grid
        self.target_channels = target_channels
        self.convs = nn.ModuleList(
            nn.Conv2d(c, target_channels, kernel_size=1) for c in level_channels
        )

    def forward(self, feats):
        if len(feats) != len(self.convs):
            raise ConfigurationError(
                f"got {len(feats)} levels, aligner built for {len(self.convs)}"
            )
        rows = []
        for conv, f in zip(self.convs, feats):
            pooled = F.adaptive_avg_pool2d(f, (self.grid, self.grid))
            rows.append(conv(pooled).flatten(1))
        return torch.stack(rows, dim=1)


def build_backbone(config: BackboneConfig, stages=None) -> StagedBackbone:
    return StagedBackbone(config, stages=stages)
