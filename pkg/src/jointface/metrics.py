"""Detection and attribute evaluation: IoU matching, PR curves, mean error."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .boxes import boxes_array, iou, iou_matrix
from .errors import NoGroundTruth, ShapeMismatch

__all__ = [
    "iou", "Match", "MatchResult", "match_detections", "PRCurve", "pr_curve",
    "AttributeReport", "attribute_report",
]


@dataclass(frozen=True)
class Match:
    index: int
    score: float
    tp: bool
    gt_index: int = -1


@dataclass
class MatchResult:
    matches: list
    n_gt: int
    unmatched_gt: int

    @property
    def tp(self) -> int:
        return sum(m.tp for m in self.matches)


def _split_preds(preds):
    if isinstance(preds, tuple) and len(preds) == 2 and isinstance(preds[0], np.ndarray):
        return np.asarray(preds[0], dtype=np.float64).reshape(-1, 4), np.asarray(preds[1], dtype=np.float64)
    boxes = [p[0] for p in preds]
    return boxes_array(boxes), np.array([float(p[1]) for p in preds], dtype=np.float64)


def match_detections(preds, gts, iou_thresh: float = 0.5) -> MatchResult:
    """Greedy matching in descending score order (ties by input order).

    Each prediction takes the unmatched gt of highest IoU; it is a true
    positive when that IoU is strictly larger than ``iou_thresh``.
    ``preds`` is a sequence of ``(box, score)`` or a ``(boxes, scores)`` array pair.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1], got {iou_thresh}")
    pb, ps = _split_preds(preds)
    gb = boxes_array(gts)
    order = np.argsort(-ps, kind="stable")
    ious = iou_matrix(pb, gb) if len(pb) and len(gb) else np.zeros((len(pb), len(gb)))
    taken = np.zeros(len(gb), dtype=bool)
    out = []
    for i in order:
        tp, gt_index = False, -1
        if len(gb):
            cand = np.where(taken, -1.0, ious[i])
            j = int(np.argmax(cand))
            if cand[j] > iou_thresh:
                taken[j] = True
                tp, gt_index = True, j
        out.append(Match(int(i), float(ps[i]), tp, gt_index))
    return MatchResult(out, len(gb), int((~taken).sum()))


@dataclass
class PRCurve:
    points: list            # (recall, precision) per distinct score threshold
    thresholds: list
    auc: float
    envelope: list = field(default_factory=list)

    @property
    def recall(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def precision(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])


def pr_curve(results: MatchResult | Sequence[MatchResult]) -> PRCurve:
    """Sweep the score threshold over every distinct score, high to low.

    AUC integrates, by trapezoid over recall starting at recall 0, the
    precision envelope ``p*(r_i) = max_{j >= i} p_j``.
    """
    if isinstance(results, MatchResult):
        results = [results]
    n_gt = sum(r.n_gt for r in results)
    if n_gt == 0:
        raise NoGroundTruth("PR curve needs at least one ground-truth face")
    scores = np.array([m.score for r in results for m in r.matches], dtype=np.float64)
    tps = np.array([m.tp for r in results for m in r.matches], dtype=bool)
    if scores.size == 0:
        return PRCurve([], [], 0.0, [])
    order = np.argsort(-scores, kind="stable")
    scores, tps = scores[order], tps[order]
    ctp = np.cumsum(tps)
    cfp = np.cumsum(~tps)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[scores[1:] != scores[:-1], True])
    recall = ctp[ends] / n_gt
    precision = ctp[ends] / (ctp[ends] + cfp[ends])
    env = np.maximum.accumulate(precision[::-1])[::-1]
    r = np.r_[0.0, recall]
    p = np.r_[env[0], env]
    auc = float(np.sum((r[1:] - r[:-1]) * (p[1:] + p[:-1]) * 0.5))
    return PRCurve(list(zip(recall.tolist(), precision.tolist())), scores[ends].tolist(), auc, env.tolist())


@dataclass
class AttributeReport:
    per_attribute_error: np.ndarray
    mean_error: float
    count: int = 0
    names: list = field(default_factory=list)


def attribute_report(preds, labels, names: Sequence[str] | None = None) -> AttributeReport:
    """Per-attribute error rate (fraction of mismatches) and their mean."""
    p = np.asarray(preds)
    y = np.asarray(labels)
    if p.shape != y.shape or p.ndim != 2:
        raise ShapeMismatch("attribute_report: predictions and labels must be equal N x M", p.shape, y.shape)
    if p.shape[0] == 0:
        raise ValueError("attribute_report needs at least one face row")
    err = (p != y).mean(axis=0)
    names = list(names) if names is not None else [f"attr{j}" for j in range(p.shape[1])]
    return AttributeReport(err, float(err.mean()), p.shape[0], names)


# ---------------------------------------------------------------------------
# report writers

def format_attribute_table(reports: dict) -> str:
    """Plain-text table with one column per report (e.g. joint, cropped)."""
    labels = list(reports)
    first = reports[labels[0]]
    width = max(12, *(len(n) for n in first.names))
    lines = ["attribute".ljust(width) + "".join(f"{k:>12}" for k in labels)]
    for j, name in enumerate(first.names):
        lines.append(name.ljust(width) + "".join(f"{reports[k].per_attribute_error[j]:12.4f}" for k in labels))
    lines.append("mean_error".ljust(width) + "".join(f"{reports[k].mean_error:12.4f}" for k in labels))
    return "\n".join(lines) + "\n"


def attribute_csv(reports: dict) -> str:
    labels = list(reports)
    first = reports[labels[0]]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["attribute", *labels])
    for j, name in enumerate(first.names):
        w.writerow([name, *(f"{reports[k].per_attribute_error[j]:.6f}" for k in labels)])
    w.writerow(["mean_error", *(f"{reports[k].mean_error:.6f}" for k in labels)])
    return buf.getvalue()


def pr_csv(curve: PRCurve) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "recall", "precision"])
    for t, (r, p) in zip(curve.thresholds, curve.points):
        w.writerow([f"{t:.6f}", f"{r:.6f}", f"{p:.6f}"])
    return buf.getvalue()


def pr_svg(curve: PRCurve, size: int = 320, title: str = "") -> str:
    """Render the PR curve as an SVG polyline (recall on x, precision on y)."""
    pad = 36
    span = size - 2 * pad

    def xy(r, p):
        return f"{pad + r * span:.2f},{pad + (1.0 - p) * span:.2f}"

    pts = [xy(0.0, curve.envelope[0] if curve.envelope else 1.0)] + [xy(r, p) for r, p in curve.points]
    label = title or f"PR curve (AUC {curve.auc:.4f})"
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">\n'
        f'  <rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="#888"/>\n'
        f'  <polyline fill="none" stroke="#1f5fbf" stroke-width="1.5" points="{" ".join(pts)}"/>\n'
        f'  <text x="{pad}" y="{pad - 10}" font-size="12">{label}</text>\n'
        f'  <text x="{size / 2:.0f}" y="{size - 8}" font-size="11" text-anchor="middle">recall</text>\n'
        f'  <text x="10" y="{size / 2:.0f}" font-size="11" transform="rotate(-90 10 {size / 2:.0f})"'
        f' text-anchor="middle">precision</text>\n'
        "</svg>\n"
    )
