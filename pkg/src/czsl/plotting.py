"""Plot emission for sweeps and mixing-weight scatters.

Every plot is accompanied by a CSV of the underlying data written by the
caller; images are a convenience, never the artifact of record.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .aggregation import BRANCHES  # noqa: E402


def plot_hyperparameter_sweep(values, aucs, hms, param_name, path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(values, aucs, marker="o", label="AUC")
    ax.plot(values, hms, marker="s", label="HM")
    ax.set_xlabel(param_name)
    ax.set_ylabel("metric")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_weight_scatter(weights, path, low_label="low-level weight",
                        high_label="high-level weight"):
    """Scatter of (lowest-level weight, highest-level weight) per sample,
    one color per branch. weights: (N, n_branches, n_levels)."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for b, branch in enumerate(BRANCHES):
        ax.scatter(weights[:, b, 0], weights[:, b, -1], s=12, alpha=0.5, label=branch)
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel(low_label)
    ax.set_ylabel(high_label)
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
