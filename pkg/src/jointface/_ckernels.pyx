# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels; see ``_pykernels`` for the reference."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef fused real:
    float
    double


def maxpool2d_forward(real[:, :, :, ::1] x, int kernel, int stride):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t oh = (h - kernel) // stride + 1, ow = (w - kernel) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((n, c, oh, ow), dtype=dtype)
    arg_arr = np.empty((n, c, oh, ow), dtype=np.int64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t a, b, i, j, di, dj, bi, bj
    cdef real best, v
    for a in range(n):
        for b in range(c):
            for i in range(oh):
                for j in range(ow):
                    bi = i * stride
                    bj = j * stride
                    best = x[a, b, bi, bj]
                    for di in range(kernel):
                        for dj in range(kernel):
                            v = x[a, b, i * stride + di, j * stride + dj]
                            if v > best:
                                best = v
                                bi = i * stride + di
                                bj = j * stride + dj
                    out[a, b, i, j] = best
                    arg[a, b, i, j] = bi * w + bj
    return out_arr, arg_arr


def maxpool2d_backward(real[:, :, :, ::1] grad_out, cnp.int64_t[:, :, :, ::1] argmax,
                       int height, int width):
    cdef Py_ssize_t n = grad_out.shape[0], c = grad_out.shape[1]
    cdef Py_ssize_t oh = grad_out.shape[2], ow = grad_out.shape[3]
    dtype = np.float32 if real is float else np.float64
    grad_arr = np.zeros((n, c, height * width), dtype=dtype)
    cdef real[:, :, ::1] grad = grad_arr
    cdef Py_ssize_t a, b, i, j
    for a in range(n):
        for b in range(c):
            for i in range(oh):
                for j in range(ow):
                    grad[a, b, argmax[a, b, i, j]] += grad_out[a, b, i, j]
    return grad_arr.reshape(n, c, height, width)


def roi_pool_forward(real[:, :, ::1] feature, cnp.int64_t[:, ::1] rois, int out_h, int out_w):
    cdef Py_ssize_t c = feature.shape[0], height = feature.shape[1], width = feature.shape[2]
    cdef Py_ssize_t r = rois.shape[0]
    dtype = np.float32 if real is float else np.float64
    out_arr = np.empty((r, c, out_h, out_w), dtype=dtype)
    arg_arr = np.empty((r, c, out_h, out_w), dtype=np.int64)
    cdef real[:, :, :, ::1] out = out_arr
    cdef cnp.int64_t[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t k, ch, i, j, y, x, hs, he, ws, we, x0, y0, rh, rw, besti
    cdef real best, v
    for k in range(r):
        x0 = rois[k, 0]
        y0 = rois[k, 1]
        rw = rois[k, 2] - x0
        rh = rois[k, 3] - y0
        for ch in range(c):
            for i in range(out_h):
                hs = y0 + (i * rh) // out_h
                he = y0 + ((i + 1) * rh + out_h - 1) // out_h
                for j in range(out_w):
                    ws = x0 + (j * rw) // out_w
                    we = x0 + ((j + 1) * rw + out_w - 1) // out_w
                    best = feature[ch, hs, ws]
                    besti = hs * width + ws
                    for y in range(hs, he):
                        for x in range(ws, we):
                            v = feature[ch, y, x]
                            if v > best:
                                best = v
                                besti = y * width + x
                    out[k, ch, i, j] = best
                    arg[k, ch, i, j] = besti
    return out_arr, arg_arr


def roi_pool_backward(real[:, :, :, ::1] grad_out, cnp.int64_t[:, :, :, ::1] argmax,
                      int channels, int height, int width):
    cdef Py_ssize_t r = grad_out.shape[0], oh = grad_out.shape[2], ow = grad_out.shape[3]
    dtype = np.float32 if real is float else np.float64
    grad_arr = np.zeros((channels, height * width), dtype=dtype)
    cdef real[:, ::1] grad = grad_arr
    cdef Py_ssize_t k, ch, i, j
    for k in range(r):
        for ch in range(channels):
            for i in range(oh):
                for j in range(ow):
                    grad[ch, argmax[k, ch, i, j]] += grad_out[k, ch, i, j]
    return grad_arr.reshape(channels, height, width)


def nms(double[:, ::1] boxes, cnp.int64_t[::1] order, double iou_thresh, Py_ssize_t max_keep=-1):
    cdef Py_ssize_t n = order.shape[0], p, q
    # score-ordered copies so the inner loop streams through memory
    sorted_arr = np.ascontiguousarray(np.asarray(boxes)[np.asarray(order)].T)
    cdef double[:, ::1] b = sorted_arr
    area_arr = (sorted_arr[2] - sorted_arr[0]) * (sorted_arr[3] - sorted_arr[1])
    cdef double[::1] area = area_arr
    suppressed = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] sup = suppressed
    cdef double iw, ih, inter, x1, y1, x2, y2
    keep = []
    for p in range(n):
        if sup[p]:
            continue
        keep.append(order[p])
        if len(keep) == max_keep:
            break
        x1 = b[0, p]
        y1 = b[1, p]
        x2 = b[2, p]
        y2 = b[3, p]
        for q in range(p + 1, n):
            if sup[q]:
                continue
            iw = min(x2, b[2, q]) - max(x1, b[0, q])
            ih = min(y2, b[3, q]) - max(y1, b[1, q])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            if inter / (area[p] + area[q] - inter) > iou_thresh:
                sup[q] = 1
    return np.asarray(keep, dtype=np.int64)
