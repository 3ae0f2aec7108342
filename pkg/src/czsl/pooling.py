"""Spatial pooling of branch feature maps.

Attention pooling prepends a channel-mean summary token to the flattened
spatial tokens, adds learnable 1-D position embeddings, runs one scaled
dot-product self-attention layer, and returns the output at the summary token.
Global average pooling is the parameter-free ablation baseline.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .errors import ConfigurationError


def gap_pool(f):
    """Per-channel spatial mean: (B,C,H,W) -> (B,C)."""
    return f.flatten(2).mean(2)


class AttentionPool(nn.Module):
    def __init__(self, channels, grid, heads=1):
        super().__init__()
        if channels % heads != 0:
            raise ConfigurationError(f"channels {channels} not divisible by {heads} heads")
        self.channels = channels
        self.heads = heads
        self.n_tokens = grid * grid + 1
        self.query = nn.Linear(channels, channels)
        self.key = nn.Linear(channels, channels)
        self.value = nn.Linear(channels, channels)
        self.out = nn.Linear(channels, channels)
        # zero-init position embeddings: the initial model treats positions alike
        self.pos_embed = nn.Parameter(torch.zeros(self.n_tokens, channels))

    def tokens(self, f):
        """(B,C,H,W) -> (B, H*W+1, C); token 0 is exactly gap_pool(f)."""
        spatial = f.flatten(2).transpose(1, 2)
        return torch.cat([gap_pool(f).unsqueeze(1), spatial], dim=1)

    def forward(self, f):
        t = self.tokens(f)
        if t.shape[1] != self.n_tokens:
            raise ConfigurationError(
                f"got {t.shape[1]} tokens, position embeddings cover {self.n_tokens}"
            )
        t = t + self.pos_embed
        b, n, c = t.shape
        h, d = self.heads, c // self.heads
        q = self.query(t).reshape(b, n, h, d).transpose(1, 2)
        k = self.key(t).reshape(b, n, h, d).transpose(1, 2)
        v = self.value(t).reshape(b, n, h, d).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
        mixed = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.out(mixed)[:, 0]
