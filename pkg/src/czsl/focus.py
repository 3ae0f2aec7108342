"""Gradient-based attention maps per branch and the focus-consistency loss.

The map for a branch is the channel mean of d(ground-truth score)/d(branch
feature map); the loss is the negative cosine between the min-max-normalized
attribute+object map sum and the normalized composition map, pushing all
branches to attend to the same regions.
"""

from __future__ import annotations

import torch

from .aggregation import BRANCHES
from .errors import GradientGraphError

EPS = 1e-8


def attention_map(scores, labels, feature, create_graph=True):
    """Channel-mean gradient of the true-class score w.r.t. the feature map.

    scores (B,K), labels (B,), feature (B,C,H,W) -> (B,H,W). With
    ``create_graph`` the returned map supports further differentiation, which
    training the consistency loss requires.
    """
    if not feature.requires_grad:
        raise GradientGraphError(
            "branch feature is detached; attention maps need gradient connectivity"
        )
    picked = scores.gather(1, labels.reshape(-1, 1)).sum()
    try:
        (grad,) = torch.autograd.grad(picked, feature, create_graph=create_graph)
    except RuntimeError as exc:
        raise GradientGraphError(f"cannot reach branch feature from scores: {exc}") from exc
    return grad.mean(dim=1)


def branch_attention_maps(result, attr_labels, obj_labels, comp_labels, create_graph=True):
    """All three maps in one backward pass; returns {branch: (B,H,W)}."""
    for branch in BRANCHES:
        if not result.branch_feature(branch).requires_grad:
            raise GradientGraphError(
                f"{branch} feature is detached; attention maps need gradient connectivity"
            )
    labels = {"attribute": attr_labels, "composition": comp_labels, "object": obj_labels}
    picked = sum(
        result.branch_scores(b).gather(1, labels[b].reshape(-1, 1)).sum() for b in BRANCHES
    )
    feats = [result.branch_feature(b) for b in BRANCHES]
    try:
        grads = torch.autograd.grad(picked, feats, create_graph=create_graph)
    except RuntimeError as exc:
        raise GradientGraphError(f"cannot reach branch features from scores: {exc}") from exc
    return {b: g.mean(dim=1) for b, g in zip(BRANCHES, grads)}


def normalize_map(m):
    """Min-max normalize each map over its flattened spatial extent.

    (B,H,W) or (H,W) -> (B, H*W) or (H*W,). Constant maps come out all zero.
    """
    single = m.dim() == 2
    flat = m.reshape(1, -1) if single else m.reshape(m.shape[0], -1)
    lo = flat.min(dim=1, keepdim=True).values
    hi = flat.max(dim=1, keepdim=True).values
    out = (flat - lo) / (hi - lo + EPS)
    return out[0] if single else out


def focus_consistency_loss(map_attr, map_obj, map_comp):
    """-cos(norm(M_a + M_o), norm(M_c)), meaned over the batch.

    If either normalized vector vanishes (constant map), that sample's
    similarity is 0 and contributes no gradient.
    """
    if map_attr.dim() == 2:
        map_attr, map_obj, map_comp = (
            m.unsqueeze(0) for m in (map_attr, map_obj, map_comp)
        )
    prim = normalize_map(map_attr + map_obj)
    comp = normalize_map(map_comp)
    dot = (prim * comp).sum(dim=1)
    denom = prim.norm(dim=1) * comp.norm(dim=1) + EPS
    return -(dot / denom).mean()
