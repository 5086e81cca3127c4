"""Pure-numpy reference versions of the hot kernels.

Loop order and accumulation order match ``_ckernels.pyx`` exactly so both
backends produce bit-identical outputs.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def maxpool2d_forward(x, kernel, stride):
    n, c, h, w = x.shape
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, oh, ow, kernel * kernel)
    local = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, local[..., None], axis=-1)[..., 0]
    rows = np.arange(oh)[:, None] * stride + local // kernel
    cols = np.arange(ow)[None, :] * stride + local % kernel
    return np.ascontiguousarray(out), (rows * w + cols).astype(np.int64)


def maxpool2d_backward(grad_out, argmax, height, width):
    n, c = grad_out.shape[:2]
    grad = np.zeros((n * c, height * width), dtype=grad_out.dtype)
    idx = argmax.reshape(n * c, -1)
    row = np.repeat(np.arange(n * c), idx.shape[1])
    np.add.at(grad, (row, idx.ravel()), grad_out.reshape(n * c, -1).ravel())
    return grad.reshape(n, c, height, width)


def roi_pool_forward(feature, rois, out_h, out_w):
    c, height, width = feature.shape
    r = rois.shape[0]
    out = np.empty((r, c, out_h, out_w), dtype=feature.dtype)
    argmax = np.empty((r, c, out_h, out_w), dtype=np.int64)
    for k in range(r):
        x0, y0, x1, y1 = (int(v) for v in rois[k])
        rh, rw = y1 - y0, x1 - x0
        for i in range(out_h):
            hs = y0 + (i * rh) // out_h
            he = y0 + -((-(i + 1) * rh) // out_h)
            for j in range(out_w):
                ws = x0 + (j * rw) // out_w
                we = x0 + -((-(j + 1) * rw) // out_w)
                patch = feature[:, hs:he, ws:we].reshape(c, -1)
                a = patch.argmax(axis=1)
                out[k, :, i, j] = patch[np.arange(c), a]
                bw = we - ws
                argmax[k, :, i, j] = (hs + a // bw) * width + ws + a % bw
    return out, argmax


def roi_pool_backward(grad_out, argmax, channels, height, width):
    grad = np.zeros((channels, height * width), dtype=grad_out.dtype)
    r = grad_out.shape[0]
    chan = np.repeat(np.arange(channels), grad_out.shape[2] * grad_out.shape[3])
    for k in range(r):
        np.add.at(grad, (chan, argmax[k].ravel()), grad_out[k].ravel())
    return grad.reshape(channels, height, width)


def nms(boxes, order, iou_thresh, max_keep=-1):
    x1, y1, x2, y2 = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    areas = (x2 - x1) * (y2 - y1)
    suppressed = np.zeros(boxes.shape[0], dtype=bool)
    keep = []
    for pos, i in enumerate(order):
        if suppressed[i]:
            continue
        keep.append(i)
        if len(keep) == max_keep:
            break
        rest = order[pos + 1:]
        iw = np.maximum(0.0, np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]))
        ih = np.maximum(0.0, np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]))
        inter = iw * ih
        ovr = inter / (areas[i] + areas[rest] - inter)
        suppressed[rest[ovr > iou_thresh]] = True
    return np.asarray(keep, dtype=np.int64)
