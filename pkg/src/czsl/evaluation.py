"""Generalized evaluation: calibrated bias sweep over fused scores.

A scalar bias added to every unseen composition's score trades seen accuracy
against unseen accuracy. The sweep enumerates every bias at which any sample's
argmax can change (all per-sample seen-minus-unseen score differences) and
evaluates at midpoints between consecutive distinct thresholds plus one point
past each end, so the curve is exact. Ties at equal effective scores resolve
to the lowest composition index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import LabelSpace, SplitArrays
from .errors import ConfigurationError, DataValidationError
from .model import ThreeBranchNet, fuse_scores


@dataclass(frozen=True)
class ScoreTable:
    """Fused scores plus the true label and its seen/unseen flag, per sample."""

    scores: np.ndarray  # (N, |Y|) float64
    true_comp: np.ndarray  # (N,) int64
    true_seen: np.ndarray  # (N,) bool

    def __post_init__(self):
        if not np.isfinite(self.scores).all():
            raise DataValidationError("score table contains non-finite scores")

    def __len__(self):
        return self.scores.shape[0]


@dataclass(frozen=True)
class EvalCurve:
    biases: np.ndarray
    seen_acc: np.ndarray
    unseen_acc: np.ndarray

    def rows(self):
        return zip(self.biases, self.seen_acc, self.unseen_acc)

    def write_csv(self, path):
        lines = ["bias,seen_acc,unseen_acc"]
        lines += [f"{float(b)!r},{float(s)!r},{float(u)!r}" for b, s, u in self.rows()]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class EvalReport:
    """Best seen/unseen accuracy, area under the seen-vs-unseen curve, and the
    best harmonic mean. One-sided tables produce a partial report (missing
    side's fields are None)."""

    best_seen: object
    best_unseen: object
    auc: object
    best_hm: object
    n_seen: int
    n_unseen: int
    extras: dict = field(default_factory=dict)

    def to_json_dict(self):
        d = {
            "S": self.best_seen,
            "U": self.best_unseen,
            "AUC": self.auc,
            "HM": self.best_hm,
            "n_seen": self.n_seen,
            "n_unseen": self.n_unseen,
        }
        d.update(self.extras)
        return d

    def write_json(self, path):
        Path(path).write_text(
            json.dumps(self.to_json_dict(), sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def from_json(cls, path):
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        extras = {
            k: v for k, v in d.items()
            if k not in ("S", "U", "AUC", "HM", "n_seen", "n_unseen")
        }
        return cls(
            best_seen=d["S"], best_unseen=d["U"], auc=d["AUC"], best_hm=d["HM"],
            n_seen=d["n_seen"], n_unseen=d["n_unseen"], extras=extras,
        )


def predict_with_bias(table: ScoreTable, bias, space: LabelSpace):
    """Argmax predictions after adding ``bias`` to unseen-composition scores.

    Ties break to the lowest composition index.
    """
    effective = table.scores + bias * (~space.seen).astype(np.float64)
    return effective.argmax(axis=1)


def candidate_biases(table: ScoreTable, space: LabelSpace):
    """Midpoints between consecutive distinct flip thresholds, plus one bias
    below the minimum and one above the maximum. The thresholds are every
    s_i(seen comp) - s_i(unseen comp) difference."""
    seen_cols = np.flatnonzero(space.seen)
    unseen_cols = np.flatnonzero(~space.seen)
    if unseen_cols.size == 0:
        raise DataValidationError("label space has no unseen compositions to sweep")
    diffs = table.scores[:, seen_cols][:, :, None] - table.scores[:, unseen_cols][:, None, :]
    thresholds = np.unique(diffs.ravel())
    mids = (thresholds[:-1] + thresholds[1:]) / 2.0
    return np.concatenate(([thresholds[0] - 1.0], mids, [thresholds[-1] + 1.0]))


def _accuracies_at(table: ScoreTable, space: LabelSpace, biases, chunk=256):
    """Seen/unseen accuracy at each bias.

    Applies the exact predict_with_bias operation (add bias to unseen columns,
    argmax with first-index tie-break) at every bias, chunked over the bias
    axis; results are bit-identical to per-bias re-classification.
    """
    mask = (~space.seen).astype(np.float64)
    biases = np.asarray(biases, dtype=np.float64)
    seen_lab = table.true_seen
    n_s = int(seen_lab.sum())
    n_u = int((~seen_lab).sum())
    seen_correct = np.empty(len(biases), dtype=np.int64)
    unseen_correct = np.empty(len(biases), dtype=np.int64)
    for start in range(0, len(biases), chunk):
        b = biases[start : start + chunk]
        effective = table.scores[None, :, :] + b[:, None, None] * mask[None, None, :]
        hits = effective.argmax(axis=2) == table.true_comp[None, :]
        seen_correct[start : start + len(b)] = hits[:, seen_lab].sum(axis=1)
        unseen_correct[start : start + len(b)] = hits[:, ~seen_lab].sum(axis=1)
    return seen_correct / n_s, unseen_correct / n_u


def sweep(table: ScoreTable, space: LabelSpace, grid=None) -> EvalCurve:
    """Trace the seen/unseen accuracy curve over the bias range.

    Exact threshold enumeration by default; ``grid=K`` evaluates K evenly
    spaced biases instead (for very large tables).
    """
    if not table.true_seen.any():
        raise DataValidationError("score table has no seen-labeled samples")
    if table.true_seen.all():
        raise DataValidationError("score table has no unseen-labeled samples")
    if grid is None:
        biases = candidate_biases(table, space)
    else:
        if grid < 2:
            raise ConfigurationError("grid must be >= 2 points")
        exact = candidate_biases(table, space)
        biases = np.linspace(exact[0], exact[-1], int(grid))
    seen_acc, unseen_acc = _accuracies_at(table, space, biases)
    return EvalCurve(biases=biases, seen_acc=seen_acc, unseen_acc=unseen_acc)


def summarize(curve: EvalCurve, n_seen, n_unseen, extras=None) -> EvalReport:
    """Best-over-sweep S and U, best harmonic mean, and the trapezoidal area
    of seen accuracy as a function of unseen accuracy (duplicate abscissas
    collapse to their maximum seen value)."""
    s = curve.seen_acc
    u = curve.unseen_acc
    best_hm = 0.0
    for si, ui in zip(s, u):
        if si + ui > 0.0:
            hm = 2.0 * si * ui / (si + ui)
            if hm > best_hm:
                best_hm = hm
    collapsed = {}
    for si, ui in zip(s, u):
        if ui not in collapsed or si > collapsed[ui]:
            collapsed[ui] = si
    points = sorted(collapsed.items())
    auc = 0.0
    for (u0, s0), (u1, s1) in zip(points[:-1], points[1:]):
        auc += (u1 - u0) * (s0 + s1) / 2.0
    return EvalReport(
        best_seen=float(s.max()),
        best_unseen=float(u.max()),
        auc=float(auc),
        best_hm=float(best_hm),
        n_seen=int(n_seen),
        n_unseen=int(n_unseen),
        extras=dict(extras or {}),
    )


# ---------------------------------------------------------------------------
# model-level evaluation


def score_table(model: ThreeBranchNet, split: SplitArrays, space: LabelSpace,
                batch_size=256, fuse_mode="sum", branch="fused"):
    """Run the model over a split in eval mode; returns (ScoreTable, weights).

    ``branch="composition"`` scores with the composition branch alone;
    weights is the (N, n_branches, n_levels) mixing-weight log.
    """
    if branch not in ("fused", "composition"):
        raise ConfigurationError(f"cannot build a composition score table from '{branch}'")
    model.eval()
    dtype = next(model.parameters()).dtype
    scores, weights = [], []
    with torch.no_grad():
        for start in range(0, len(split), batch_size):
            idx = np.arange(start, min(start + batch_size, len(split)))
            images = torch.as_tensor(split.images[idx], dtype=dtype)
            result = model(images, sample_indices=idx, draw_key=0)
            if branch == "composition":
                fused = result.comp_scores
            else:
                fused = fuse_scores(
                    result.attr_scores, result.obj_scores, result.comp_scores,
                    space, mode=fuse_mode,
                )
            scores.append(fused.double().numpy())
            weights.append(result.weights.double().numpy())
    table = ScoreTable(
        scores=np.concatenate(scores) if scores else np.zeros((0, space.n_comps)),
        true_comp=split.comp_idx,
        true_seen=space.seen[split.comp_idx],
    )
    return table, (np.concatenate(weights) if weights else np.zeros((0, 0, 0)))


def report_for_split(model, split, space, fuse_mode="sum", grid=None,
                     branch="fused", extras=None):
    """Full sweep report when the split has both sides; otherwise a partial
    report scored at bias 0 for the side that exists. Returns (report, curve);
    curve is None for partial reports."""
    table, _ = score_table(model, split, space, fuse_mode=fuse_mode, branch=branch)
    return report_for_table(table, space, grid=grid, extras=extras)


def report_for_table(table: ScoreTable, space: LabelSpace, grid=None, extras=None):
    n_s = int(table.true_seen.sum())
    n_u = int((~table.true_seen).sum())
    if n_s and n_u:
        curve = sweep(table, space, grid=grid)
        return summarize(curve, n_s, n_u, extras=extras), curve
    predictions = predict_with_bias(table, 0.0, space)
    accuracy = float((predictions == table.true_comp).mean()) if len(table) else None
    report = EvalReport(
        best_seen=accuracy if n_s else None,
        best_unseen=accuracy if n_u else None,
        auc=None,
        best_hm=None,
        n_seen=n_s,
        n_unseen=n_u,
        extras=dict(extras or {}),
    )
    return report, None


def write_weight_log(path, weights, levels):
    """CSV ``sample,branch,level,weight``; level is the backbone stage index."""
    from .aggregation import BRANCHES

    lines = ["sample,branch,level,weight"]
    for i in range(weights.shape[0]):
        for b, branch in enumerate(BRANCHES):
            for c, level in enumerate(levels):
                lines.append(f"{i},{branch},{level},{float(weights[i, b, c])!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
