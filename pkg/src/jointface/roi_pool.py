"""RoI max pooling to a fixed output grid."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import EmptyRoI, MaskShapeMismatch, ShapeMismatch
from .tensor import Tensor, apply, as_tensor, register_primitive


@dataclass(frozen=True)
class RoIGrid:
    output_h: int = 4
    output_w: int = 4
    spatial_scale: float = 0.25

    def __post_init__(self):
        if self.output_h < 1 or self.output_w < 1:
            raise ValueError(f"RoI grid extents must be >= 1, got {self.output_h}x{self.output_w}")
        if not self.spatial_scale > 0:
            raise ValueError(f"spatial_scale must be positive, got {self.spatial_scale}")


def _round(v: float) -> int:
    return int(math.floor(v + 0.5))


def quantize_rois(rois, spatial_scale: float, height: int, width: int) -> np.ndarray:
    """Map image-space boxes to half-open feature-cell ranges ``[x0, x1) x [y0, y1)``.

    Both ends are rounded half-up to the nearest cell edge, clamped to the map,
    and widened to at least one cell.
    """
    r = np.asarray([b.as_array() if hasattr(b, "as_array") else b for b in rois], dtype=np.float64).reshape(-1, 4)
    out = np.empty((r.shape[0], 4), dtype=np.int64)
    for k, (x1, y1, x2, y2) in enumerate(r * spatial_scale):
        if not np.all(np.isfinite((x1, y1, x2, y2))) or x2 <= 0 or y2 <= 0 or x1 >= width or y1 >= height:
            raise EmptyRoI(f"RoI {tuple(r[k])} does not intersect the {height}x{width} feature map")
        xs, xe = _span(x1, x2, width)
        ys, ye = _span(y1, y2, height)
        out[k] = (xs, ys, xe, ye)
    return out


def _span(lo: float, hi: float, limit: int) -> tuple[int, int]:
    s = min(max(_round(lo), 0), limit)
    e = min(max(_round(hi), 0), limit)
    if e <= s:
        s = min(s, limit - 1)
        e = s + 1
    return s, e


def roi_bins(start: int, extent: int, out: int) -> list[tuple[int, int]]:
    """Half-open cell ranges ``[floor(j*w/W), ceil((j+1)*w/W))`` offset by ``start``."""
    return [(start + (j * extent) // out, start + -((-(j + 1) * extent) // out)) for j in range(out)]


def roi_pool_forward(feature, rois, grid: RoIGrid):
    """Pool each RoI of a ``1 x C x Hf x Wf`` map to ``N x C x H x W``.

    Returns ``(Tensor, mask)`` where ``mask`` holds the flat ``row * Wf + col``
    argmax for every output cell (ties go to the first row-major position).
    """
    feature = as_tensor(feature)
    if feature.data.ndim != 4 or feature.shape[0] != 1:
        raise ShapeMismatch("roi_pool expects a 1 x C x H x W feature map", feature.shape)
    _, c, h, w = feature.shape
    cells = quantize_rois(rois, grid.spatial_scale, h, w)
    fmap = np.ascontiguousarray(feature.data[0])
    out, mask = kernels.roi_pool_forward(fmap, np.ascontiguousarray(cells), grid.output_h, grid.output_w)
    shape = feature.shape
    t = apply("roi_pool", out, (feature,), lambda g: (roi_pool_backward(g, mask, shape),))
    return t, mask


@register_primitive("roi_pool")
def roi_pool(feature, rois, grid: RoIGrid) -> Tensor:
    return roi_pool_forward(feature, rois, grid)[0]


def roi_pool_backward(grad_out, mask, feature_shape) -> np.ndarray:
    """Scatter-add ``grad_out`` onto the recorded argmax positions."""
    g = np.asarray(grad_out.data if isinstance(grad_out, Tensor) else grad_out)
    mask = np.asarray(mask)
    if g.shape != mask.shape:
        raise MaskShapeMismatch(f"gradient {g.shape} does not match mask {mask.shape}")
    _, c, h, w = feature_shape
    if g.ndim != 4 or g.shape[1] != c:
        raise MaskShapeMismatch(f"gradient {g.shape} does not match feature channels {c}")
    if g.dtype not in (np.float32, np.float64):
        g = g.astype(np.float64)
    grad = kernels.roi_pool_backward(np.ascontiguousarray(g), np.ascontiguousarray(mask, dtype=np.int64), c, h, w)
    return grad[None]
