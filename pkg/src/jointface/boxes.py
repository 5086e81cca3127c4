"""Axis-aligned boxes, IoU, and the anchor-relative delta parameterization.

Boxes are ``(x1, y1, x2, y2)`` in image pixels with the origin top-left and
continuous extents (width is ``x2 - x1``, no +1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import DegenerateBox


@dataclass(frozen=True)
class BBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise DegenerateBox(f"non-finite box {vals}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise DegenerateBox(f"box needs x2 > x1 and y2 > y1, got {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + 0.5 * self.width, self.y1 + 0.5 * self.height)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def clip(self, width: float, height: float) -> "BBox":
        return BBox(min(max(self.x1, 0.0), width), min(max(self.y1, 0.0), height),
                    min(max(self.x2, 0.0), width), min(max(self.y2, 0.0), height))

    def hflip(self, width: float) -> "BBox":
        return BBox(width - self.x2, self.y1, width - self.x1, self.y2)

    @classmethod
    def from_array(cls, a) -> "BBox":
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class BoxDelta:
    tx: float
    ty: float
    tw: float
    th: float

    def as_array(self) -> np.ndarray:
        return np.array([self.tx, self.ty, self.tw, self.th], dtype=np.float64)


def boxes_array(boxes: Iterable) -> np.ndarray:
    """Stack BBoxes (or 4-sequences) into an ``(n, 4)`` float64 array."""
    rows = [b.as_array() if isinstance(b, BBox) else np.asarray(b, dtype=np.float64) for b in boxes]
    if not rows:
        return np.zeros((0, 4), dtype=np.float64)
    return np.stack(rows).astype(np.float64)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``(n, 4)`` and ``(m, 4)`` box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 for disjoint boxes."""
    a = a if isinstance(a, BBox) else BBox(*a)
    b = b if isinstance(b, BBox) else BBox(*b)
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def _center_form(boxes: np.ndarray):
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return boxes[:, 0] + 0.5 * w, boxes[:, 1] + 0.5 * h, w, h


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Vectorized ``encode_delta`` over matching rows."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gx, gy, gw, gh = _center_form(gt)
    ax, ay, aw, ah = _center_form(anchors)
    if np.any(gw <= 0) or np.any(gh <= 0) or np.any(aw <= 0) or np.any(ah <= 0):
        raise DegenerateBox("encode needs boxes of positive width and height")
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_boxes(deltas: np.ndarray, anchors: np.ndarray, max_log_ratio: float | None = None) -> np.ndarray:
    """Vectorized ``decode_delta``; ``max_log_ratio`` optionally caps tw/th."""
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    ax, ay, aw, ah = _center_form(anchors)
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise DegenerateBox("decode needs anchors of positive width and height")
    tw, th = deltas[:, 2], deltas[:, 3]
    if max_log_ratio is not None:
        tw = np.minimum(tw, max_log_ratio)
        th = np.minimum(th, max_log_ratio)
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(tw)
    h = ah * np.exp(th)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)


def encode_delta(gt: BBox, anchor: BBox) -> BoxDelta:
    return BoxDelta(*encode_boxes(gt.as_array(), anchor.as_array())[0].tolist())


def decode_delta(delta: BoxDelta, anchor: BBox) -> BBox:
    d = delta.as_array() if isinstance(delta, BoxDelta) else np.asarray(delta, dtype=np.float64)
    return BBox.from_array(decode_boxes(d, anchor.as_array())[0])


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    out = np.array(boxes, dtype=np.float64, copy=True).reshape(-1, 4)
    out[:, 0::2] = np.clip(out[:, 0::2], 0.0, width)
    out[:, 1::2] = np.clip(out[:, 1::2], 0.0, height)
    return out
