"""Pure-Python (numpy) versions of the compiled box kernels.

Same signatures and semantics as ``_kernels.pyx``; selected automatically when
the extension is not built, or forced with ``SRDEFECT_PURE_PYTHON=1``.
"""

import numpy as np


def iou_matrix(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def nms(boxes, scores, labels, iou_thr):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.asarray(labels, dtype=np.int64)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    keep = []
    for i in order:
        if keep:
            kept = np.asarray(keep)
            same = kept[labels[kept] == labels[i]]
            if same.size and iou_matrix(boxes[i : i + 1], boxes[same]).max() >= iou_thr:
                continue
        keep.append(int(i))
    return np.asarray(keep, dtype=np.int64)


def greedy_match(det_boxes, det_labels, gt_boxes, gt_labels, iou_thr):
    det_labels = np.asarray(det_labels, dtype=np.int64)
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    n, m = len(det_labels), len(gt_labels)
    out = np.full(n, -1, dtype=np.int64)
    if n == 0 or m == 0:
        return out
    ious = iou_matrix(det_boxes, gt_boxes)
    used = np.zeros(m, dtype=bool)
    for i in range(n):
        cand = np.where(~used & (gt_labels == det_labels[i]), ious[i], -1.0)
        j = int(np.argmax(cand))  # first index wins IoU ties
        if cand[j] >= iou_thr:
            used[j] = True
            out[i] = j
    return out
