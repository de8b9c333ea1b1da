"""Backend selection for the box kernels.

The compiled extension is used when importable; set ``SRDEFECT_PURE_PYTHON=1``
to force the numpy fallback.
"""

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py
if not os.environ.get("SRDEFECT_PURE_PYTHON"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _kernels_py

BACKENDS = {"python": _kernels_py}
if BACKEND == "cython":
    BACKENDS["cython"] = _impl


def _boxes(a):
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 4))


def _ints(a):
    return np.ascontiguousarray(np.asarray(a, dtype=np.int64).reshape(-1))


def iou_matrix(a, b, backend=None):
    """Pairwise IoU of two ``(N, 4)`` / ``(M, 4)`` xyxy arrays."""
    impl = BACKENDS[backend] if backend else _impl
    return impl.iou_matrix(_boxes(a), _boxes(b))


def nms(boxes, scores, labels, iou_thr, backend=None):
    """Indices kept by greedy per-label NMS, in descending score order."""
    impl = BACKENDS[backend] if backend else _impl
    scores = np.ascontiguousarray(np.asarray(scores, dtype=np.float64).reshape(-1))
    return impl.nms(_boxes(boxes), scores, _ints(labels), float(iou_thr))


def greedy_match(det_boxes, det_labels, gt_boxes, gt_labels, iou_thr, backend=None):
    """GT index (or -1) for each detection, detections taken in the given order."""
    impl = BACKENDS[backend] if backend else _impl
    return impl.greedy_match(
        _boxes(det_boxes), _ints(det_labels), _boxes(gt_boxes), _ints(gt_labels), float(iou_thr)
    )
