"""Face region proposals: anchors, NMS, proposal decoding and anchor targets."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import kernels
from .boxes import BBox, BoxDelta, boxes_array, clip_boxes, decode_boxes, encode_boxes, iou_matrix
from .errors import EmptyConfig, ShapeMismatch

FACE, BACKGROUND, IGNORE = 1, 0, -1

# exp() cap for predicted log size ratios; keeps wild early predictions finite
MAX_LOG_RATIO = math.log(1000.0 / 16.0)


@dataclass(frozen=True)
class Anchor:
    box: BBox
    feature_cell: tuple[int, int]
    scale_index: int
    aspect_index: int


@dataclass(frozen=True)
class Proposal:
    box: BBox
    score: float
    anchor_index: int = -1


@dataclass
class AnchorTargets:
    labels: np.ndarray    # (n,) FACE / BACKGROUND / IGNORE
    deltas: np.ndarray    # (n, 4) against the best-matching gt
    matched: np.ndarray   # (n,) index of best gt, -1 when there is none
    max_iou: np.ndarray   # (n,)

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        label = {FACE: "face", BACKGROUND: "background", IGNORE: "ignore"}[int(self.labels[i])]
        return label, BoxDelta(*self.deltas[i].tolist())


def anchor_array(feature_shape, stride: float, scales: Sequence[float], ratios: Sequence[float]) -> np.ndarray:
    """``(rows*cols*S*R, 4)`` anchor boxes in row-major, then scale, then ratio order.

    A ratio is height/width; the anchor area stays ``scale**2``.
    """
    if not scales or not ratios:
        raise EmptyConfig("anchor scales and ratios must be nonempty")
    if stride < 1:
        raise EmptyConfig(f"anchor stride must be >= 1, got {stride}")
    rows, cols = feature_shape
    sizes = np.array([(s / math.sqrt(r), s * math.sqrt(r)) for s in scales for r in ratios])
    cy = (np.arange(rows) + 0.5) * stride
    cx = (np.arange(cols) + 0.5) * stride
    cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
    centers = np.stack([cxx.ravel(), cyy.ravel()], axis=1)
    w = sizes[None, :, 0]
    h = sizes[None, :, 1]
    x = centers[:, 0:1]
    y = centers[:, 1:2]
    out = np.stack([x - 0.5 * w, y - 0.5 * h, x + 0.5 * w, y + 0.5 * h], axis=2)
    return out.reshape(-1, 4)


def generate_anchors(feature_shape, stride: float, scales: Sequence[float], ratios: Sequence[float]) -> list[Anchor]:
    arr = anchor_array(feature_shape, stride, scales, ratios)
    rows, cols = feature_shape
    ns, nr = len(scales), len(ratios)
    out = []
    for k, row in enumerate(arr):
        cell, rest = divmod(k, ns * nr)
        si, ai = divmod(rest, nr)
        out.append(Anchor(BBox.from_array(row), divmod(cell, cols), si, ai))
    return out


def _as_box_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.astype(np.float64).reshape(-1, 4)
    items = [a.box if isinstance(a, Anchor) else a for a in boxes]
    return boxes_array(items)


def nms_order(scores: np.ndarray) -> np.ndarray:
    """Descending-score order with ties broken by lower index."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable").astype(np.int64)


def nms(boxes, scores, iou_thresh: float) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices in descending-score order.

    A box is suppressed when its IoU with an already kept box exceeds ``iou_thresh``.
    """
    b = np.ascontiguousarray(_as_box_array(boxes))
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if b.shape[0] != s.shape[0]:
        raise ShapeMismatch("nms: one score per box", b.shape, s.shape)
    if b.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return kernels.nms(b, nms_order(s), float(iou_thresh))


def propose_arrays(scores, deltas, anchors, image_size, top_k: int, nms_iou: float | None,
                   min_size: float = 1.0):
    """Array form of :func:`propose`: returns ``(boxes, scores, anchor_indices)``."""
    a = _as_box_array(anchors)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if s.shape[0] != a.shape[0] or d.shape[0] != a.shape[0]:
        raise ShapeMismatch("propose: score/delta maps do not match the anchor grid",
                            (s.shape[0], d.shape[0]), (a.shape[0],))
    width, height = image_size
    boxes = clip_boxes(decode_boxes(d, a, MAX_LOG_RATIO), width, height)
    valid = ((boxes[:, 2] - boxes[:, 0]) >= min_size) & ((boxes[:, 3] - boxes[:, 1]) >= min_size)
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64)
    if nms_iou is None:
        keep = nms_order(s[idx])
    else:
        keep = kernels.nms(np.ascontiguousarray(boxes[idx]), nms_order(s[idx]), float(nms_iou), top_k)
    keep = idx[keep[:top_k]]
    return boxes[keep], s[keep], keep


def propose(score_map, delta_map, anchors, image_size, top_k: int, nms_iou: float | None,
            min_size: float = 1.0) -> list[Proposal]:
    """Decode, clip, suppress and rank proposals.

    ``score_map`` holds one face probability per anchor and ``delta_map`` four
    deltas per anchor, both in anchor order. ``nms_iou=None`` selects pure
    top-K ranking. Equal scores keep anchor order.
    """
    sm = score_map.data if hasattr(score_map, "data") and not isinstance(score_map, np.ndarray) else score_map
    dm = delta_map.data if hasattr(delta_map, "data") and not isinstance(delta_map, np.ndarray) else delta_map
    boxes, scores, idx = propose_arrays(sm, dm, anchors, image_size, top_k, nms_iou, min_size)
    return [Proposal(BBox.from_array(b), float(s), int(i)) for b, s, i in zip(boxes, scores, idx)]


def assign_anchor_targets(anchors, gt_boxes, pos_iou: float = 0.7, neg_iou: float = 0.3) -> AnchorTargets:
    """Label anchors face / background / ignore by IoU with the ground truth.

    Face when the best IoU reaches ``pos_iou``; every gt box additionally
    claims its best-overlapping anchor(s). Background below ``neg_iou``.
    """
    if not 0.0 <= neg_iou <= pos_iou <= 1.0:
        raise ValueError(f"need 0 <= neg_iou <= pos_iou <= 1, got {neg_iou}, {pos_iou}")
    a = _as_box_array(anchors)
    g = _as_box_array(gt_boxes)
    n = a.shape[0]
    if g.shape[0] == 0:
        return AnchorTargets(np.full(n, BACKGROUND, dtype=np.int64), np.zeros((n, 4)),
                             np.full(n, -1, dtype=np.int64), np.zeros(n))
    ious = iou_matrix(a, g)
    matched = ious.argmax(axis=1)
    best = ious[np.arange(n), matched]
    labels = np.full(n, IGNORE, dtype=np.int64)
    labels[best < neg_iou] = BACKGROUND
    labels[best >= pos_iou] = FACE
    gt_best = ious.max(axis=0)
    for j in range(g.shape[0]):
        if gt_best[j] <= 0:
            continue
        winners = np.flatnonzero(ious[:, j] == gt_best[j])
        labels[winners] = FACE
        matched[winners] = j
    deltas = encode_boxes(g[matched], a)
    return AnchorTargets(labels, deltas, matched.astype(np.int64), best)
