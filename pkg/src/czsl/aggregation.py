"""Instance-conditioned mixing of aligned feature levels into branch features.

A small CNN looks at the raw image and emits one row of mixing logits per
branch; a temperature softmax over the level axis turns each row into a convex
combination. Fixed strategies (highest-level only, uniform mean, random level)
cover the ablation baselines.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError

BRANCHES = ("attribute", "composition", "object")
STRATEGIES = ("learned", "standard", "mean", "random", "random-simplex")


class AggregationPredictor(nn.Module):
    """Lightweight staged CNN: two 3x3 convolutions per stage (the first with
    stride 2), global average pooling, and a linear head to branch*level logits."""

    def __init__(self, n_levels, stage_channels=(16, 32, 64), n_branches=len(BRANCHES)):
        super().__init__()
        self.n_branches = n_branches
        self.n_levels = n_levels
        layers = []
        in_ch = 3
        for out_ch in stage_channels:
            layers += [
                nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1),
                nn.ReLU(),
                nn.Conv2d(out_ch, out_ch, 3, stride=1, padding=1),
                nn.ReLU(),
            ]
            in_ch = out_ch
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(in_ch, n_branches * n_levels)

    def forward(self, images):
        h = self.body(images)
        h = h.flatten(2).mean(2)
        return self.head(h).reshape(-1, self.n_branches, self.n_levels)


def _random_rows(kind, n_levels, n_branches, seed, sample_indices, draw_key):
    rows = np.empty((len(sample_indices), n_branches, n_levels))
    for i, idx in enumerate(sample_indices):
        rng = np.random.default_rng(
            np.random.SeedSequence((int(seed), int(idx), int(draw_key)))
        )
        if kind == "random":
            picks = rng.integers(0, n_levels, size=n_branches)
            rows[i] = np.eye(n_levels)[picks]
        else:
            rows[i] = rng.dirichlet(np.ones(n_levels), size=n_branches)
    return rows


def mixing_weights(
    images,
    predictor: AggregationPredictor,
    tau,
    strategy="learned",
    seed=0,
    sample_indices=None,
    draw_key=0,
):
    """Per-sample (B, n_branches, n_levels) row-stochastic mixing weights.

    ``learned`` is differentiable: row-softmax of predictor logits / tau. The
    random strategies draw per sample from a stream keyed by (seed,
    sample_index, draw_key) so results do not depend on batch order; pass a new
    draw_key (e.g. the epoch) to resample.
    """
    if strategy not in STRATEGIES:
        raise ConfigurationError(f"unknown aggregation strategy '{strategy}'")
    n_b, n_f = predictor.n_branches, predictor.n_levels
    batch = images.shape[0]
    if strategy == "learned":
        if tau <= 0:
            raise ConfigurationError(f"softmax temperature must be > 0, got {tau}")
        logits = predictor(images)
        return torch.softmax(logits / tau, dim=-1)

    if strategy == "standard":
        w = torch.zeros(batch, n_b, n_f, dtype=images.dtype)
        w[..., -1] = 1.0
    elif strategy == "mean":
        w = torch.full((batch, n_b, n_f), 1.0 / n_f, dtype=images.dtype)
    else:
        if sample_indices is None:
            sample_indices = np.arange(batch)
        rows = _random_rows(strategy, n_f, n_b, seed, sample_indices, draw_key)
        w = torch.as_tensor(rows, dtype=images.dtype)
    return w


def aggregate(weights, aligned):
    """Mix aligned level rows into branch rows: (B,N_b,N_f) @ (B,N_f,D)."""
    if weights.shape[-1] != aligned.shape[1]:
        raise ConfigurationError(
            f"weight columns ({weights.shape[-1]}) != aligned levels ({aligned.shape[1]})"
        )
    return torch.bmm(weights, aligned)
