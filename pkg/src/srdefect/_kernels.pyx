# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled box kernels: IoU matrix, per-category NMS, greedy GT matching.

All boxes are ``(N, 4)`` float64 arrays in ``x0, y0, x1, y1`` order.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline double _iou(double ax0, double ay0, double ax1, double ay1,
                        double bx0, double by0, double bx1, double by1) nogil:
    cdef double iw = min(ax1, bx1) - max(ax0, bx0)
    cdef double ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    cdef double inter = iw * ih
    cdef double union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def iou_matrix(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            for j in range(m):
                out[i, j] = _iou(a[i, 0], a[i, 1], a[i, 2], a[i, 3],
                                 b[j, 0], b[j, 1], b[j, 2], b[j, 3])
    return out_arr


def nms(const double[:, ::1] boxes, const double[::1] scores,
        const cnp.int64_t[::1] labels, double iou_thr):
    cdef Py_ssize_t n = boxes.shape[0], ii, jj, i, j, nkeep = 0
    cdef cnp.int64_t[::1] order = np.argsort(-np.asarray(scores), kind="stable").astype(np.int64)
    keep_arr = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] keep = keep_arr
    cdef bint ok
    with nogil:
        for ii in range(n):
            i = order[ii]
            ok = True
            for jj in range(nkeep):
                j = keep[jj]
                if labels[j] != labels[i]:
                    continue
                if _iou(boxes[i, 0], boxes[i, 1], boxes[i, 2], boxes[i, 3],
                        boxes[j, 0], boxes[j, 1], boxes[j, 2], boxes[j, 3]) >= iou_thr:
                    ok = False
                    break
            if ok:
                keep[nkeep] = i
                nkeep += 1
    return keep_arr[:nkeep].copy()


def greedy_match(const double[:, ::1] det_boxes, const cnp.int64_t[::1] det_labels,
                 const double[:, ::1] gt_boxes, const cnp.int64_t[::1] gt_labels,
                 double iou_thr):
    cdef Py_ssize_t n = det_boxes.shape[0], m = gt_boxes.shape[0], i, j, best
    cdef double best_iou, v
    out_arr = np.full(n, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    used_arr = np.zeros(m, dtype=np.uint8)
    cdef cnp.uint8_t[::1] used = used_arr
    with nogil:
        for i in range(n):
            best = -1
            best_iou = -1.0
            for j in range(m):
                if used[j] or gt_labels[j] != det_labels[i]:
                    continue
                v = _iou(det_boxes[i, 0], det_boxes[i, 1], det_boxes[i, 2], det_boxes[i, 3],
                         gt_boxes[j, 0], gt_boxes[j, 1], gt_boxes[j, 2], gt_boxes[j, 3])
                if v >= iou_thr and v > best_iou:
                    best_iou = v
                    best = j
            if best >= 0:
                used[best] = 1
                out[i] = best
    return out_arr
