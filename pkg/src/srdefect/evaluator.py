"""Detection scoring: NMS, all-point AP at IoU 0.5, upscale-then-detect, zero-shot, throughput."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import kernels
from .core import BBox, DataError, Detection, GrayImage, boxes_to_array
from .manifest import DatasetManifest, dumps
from .model import Checkpoint, Detector, arrays_to_detections, decode_arrays

REPORT_FORMAT = "srdefect-report/1"


# ---------------------------------------------------------------- NMS / AP

def _det_arrays(dets: list[Detection]):
    boxes = np.array([d.box.xyxy() for d in dets], dtype=np.float64).reshape(-1, 4)
    scores = np.array([d.confidence for d in dets], dtype=np.float64)
    labels = np.array([d.box.category for d in dets], dtype=np.int64)
    return boxes, scores, labels


def nms(dets: list[Detection], iou_thr: float = 0.5) -> list[Detection]:
    """Greedy per-category suppression in descending confidence (stable on ties)."""
    if not 0.0 < iou_thr <= 1.0:
        raise ValueError("iou_thr must lie in (0, 1]")
    if not dets:
        return []
    keep = kernels.nms(*_det_arrays(dets), iou_thr)
    return [dets[i] for i in keep]


def _as_images(dets, gts):
    """Accept one image (flat lists) or a dataset (list of per-image lists)."""
    if gts and isinstance(gts[0], BBox) or dets and isinstance(dets[0], Detection):
        return [list(dets)], [list(gts)]
    if not gts and not dets:
        return [[]], [[]]
    if len(dets) != len(gts):
        raise ValueError("dets and gts must list the same number of images")
    return dets, gts


def match_category(dets_per_image, gts_per_image, category: int, iou_thr: float = 0.5):
    """(confidences, tp flags, n_gt) for one category, matching image by image."""
    confs, tps, n_gt = [], [], 0
    for dets, gts in zip(dets_per_image, gts_per_image):
        gt = [g for g in gts if g.category == category]
        dt = sorted((d for d in dets if d.box.category == category), key=lambda d: -d.confidence)
        n_gt += len(gt)
        if not dt:
            continue
        db, ds, dl = _det_arrays(dt)
        if gt:
            gb = boxes_to_array(gt)
            gl = np.full(len(gt), category, dtype=np.int64)
        else:
            gb, gl = np.zeros((0, 4)), np.zeros(0, dtype=np.int64)
        m = kernels.greedy_match(db, dl, gb, gl, iou_thr)
        confs.append(ds)
        tps.append(m >= 0)
    if confs:
        return np.concatenate(confs), np.concatenate(tps), n_gt
    return np.zeros(0), np.zeros(0, dtype=bool), n_gt


def pr_curve(confs: np.ndarray, tps: np.ndarray, n_gt: int):
    """Recall/precision at every distinct-confidence cut, highest confidence first."""
    if n_gt == 0 or confs.size == 0:
        return np.zeros(0), np.zeros(0)
    order = np.argsort(-confs, kind="stable")
    c, t = confs[order], tps[order].astype(np.float64)
    ctp, cfp = np.cumsum(t), np.cumsum(1.0 - t)
    last = np.r_[np.flatnonzero(np.diff(c) != 0), c.size - 1]
    recall = ctp[last] / n_gt
    precision = ctp[last] / (ctp[last] + cfp[last])
    return recall, precision


def ap_from_pr(recall: np.ndarray, precision: np.ndarray) -> float:
    """All-point interpolation: area under the monotone precision envelope."""
    if recall.size == 0:
        return 0.0
    r = np.r_[0.0, recall]
    p = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum((r[1:] - r[:-1]) * p))


def average_precision(dets, gts, category: int, iou_thr: float = 0.5) -> float | None:
    """AP for one category; ``None`` when the category has neither GTs nor detections."""
    dets_pi, gts_pi = _as_images(dets, gts)
    confs, tps, n_gt = match_category(dets_pi, gts_pi, category, iou_thr)
    if n_gt == 0:
        return None if confs.size == 0 else 0.0
    return ap_from_pr(*pr_curve(confs, tps, n_gt))


# ---------------------------------------------------------------- reports

@dataclass
class EvalReport:
    categories: list[str]
    ap: dict[str, float | None]
    mAP: float
    pr: dict[str, list[list[float]]]
    counts: dict[str, dict[str, int]]
    config: dict = field(default_factory=dict)
    detections: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "categories": self.categories,
            "ap": self.ap,
            "mAP": self.mAP,
            "pr": self.pr,
            "counts": self.counts,
            "config": self.config,
            "detections": self.detections,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if d.get("format") != REPORT_FORMAT:
            raise DataError("not an evaluation report")
        return cls(d["categories"], d["ap"], d["mAP"], d["pr"], d["counts"], d.get("config", {}),
                   d.get("detections", []))

    def save(self, path: str | Path) -> Path:
        """Write ``<path>`` (JSON) and a per-category CSV next to it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dumps(self.to_dict()))
        with open(path.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["category", "ap50", "tp", "fp", "fn"])
            for name in self.categories:
                c = self.counts[name]
                ap = self.ap[name]
                w.writerow([name, "" if ap is None else f"{ap:.6f}", c["tp"], c["fp"], c["fn"]])
            w.writerow(["mAP", f"{self.mAP:.6f}", "", "", ""])
        return path

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        import json
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, ValueError) as exc:
            raise DataError(f"cannot read report {path}: {exc}") from exc


def score(dets_per_image: list[list[Detection]], gts_per_image: list[list[BBox]], categories: list[str],
          iou_thr: float = 0.5, op_thr: float = 0.25, config: dict | None = None,
          names: list[str] | None = None) -> EvalReport:
    """Build a report from per-image detections and ground truth."""
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("one detection list per image required")
    ap, pr, counts = {}, {}, {}
    for k, name in enumerate(categories):
        confs, tps, n_gt = match_category(dets_per_image, gts_per_image, k, iou_thr)
        if n_gt == 0:
            ap[name] = None if confs.size == 0 else 0.0
            pr[name] = []
        else:
            r, p = pr_curve(confs, tps, n_gt)
            ap[name] = ap_from_pr(r, p)
            pr[name] = [[float(a), float(b)] for a, b in zip(r, p)]
        # operating-point counts: a prefix of the same greedy matching
        op = confs >= op_thr
        tp = int(tps[op].sum())
        counts[name] = {"tp": tp, "fp": int(op.sum()) - tp, "fn": n_gt - tp, "gt": n_gt}
    present = [ap[n] for n in categories if counts[n]["gt"] > 0]
    m_ap = float(np.mean(present)) if present else 0.0
    dets_out = []
    for i, dets in enumerate(dets_per_image):
        dets_out.append({
            "image": names[i] if names else i,
            "detections": [[d.box.category, round(d.box.cx, 6), round(d.box.cy, 6), round(d.box.w, 6),
                            round(d.box.h, 6), round(d.confidence, 6)] for d in dets],
        })
    cfg = {"iou_thr": iou_thr, "op_thr": op_thr, "n_images": len(dets_per_image), **(config or {})}
    return EvalReport(list(categories), ap, m_ap, pr, counts, cfg, dets_out)


# ---------------------------------------------------------------- inference

def images_to_tensor(images: list[GrayImage]) -> torch.Tensor:
    return torch.from_numpy(np.stack([im.pixels for im in images])[:, None].copy())


@torch.no_grad()
def predict(model: Detector, images: torch.Tensor | list[GrayImage], conf_thr: float = 0.001,
            nms_thr: float = 0.5, batch_size: int = 16, max_det: int = 300) -> list[list[Detection]]:
    """Decoded, NMS-filtered detections per image."""
    if not isinstance(images, torch.Tensor):
        images = images_to_tensor(images)
    was_training = model.training
    model.eval()
    side = images.shape[-1]
    out = []
    try:
        for i in range(0, images.shape[0], batch_size):
            raw = model(images[i:i + batch_size])
            for boxes, scores, labels in decode_arrays(raw, model.cfg, side, conf_thr, max_det):
                keep = kernels.nms(boxes, scores, labels, nms_thr) if len(scores) else np.zeros(0, np.int64)
                out.append(arrays_to_detections(boxes[keep], scores[keep], labels[keep]))
    finally:
        model.train(was_training)
    return out


def _load_split(manifest: DatasetManifest, split: str | None):
    sub = manifest if split is None else manifest.split(split)
    order = sorted(range(len(sub.entries)), key=lambda i: sub.entries[i].image)
    samples = [sub.load_sample(i) for i in order]
    names = [sub.entries[i].image for i in order]
    return samples, names


def _model_of(checkpoint) -> Detector:
    if isinstance(checkpoint, Detector):
        return checkpoint
    if isinstance(checkpoint, (str, Path)):
        checkpoint = Checkpoint.load(checkpoint)
    return checkpoint.build()


def _check_side(model: Detector, side: int) -> None:
    if side != model.cfg.input_size:
        raise ValueError(f"detector expects side {model.cfg.input_size}, images have side {side}")


def evaluate(checkpoint, manifest: DatasetManifest, conf_thr: float = 0.001, nms_thr: float = 0.5,
             split: str | None = None, iou_thr: float = 0.5, op_thr: float = 0.25) -> EvalReport:
    model = _model_of(checkpoint)
    samples, names = _load_split(manifest, split)
    if not samples:
        raise DataError("no images to evaluate")
    _check_side(model, samples[0].image.height)
    dets = predict(model, [s.image for s in samples], conf_thr, nms_thr)
    cfg = {"conf_thr": conf_thr, "nms_thr": nms_thr, "split": split,
           "dataset": str(manifest.root), "dataset_hash": manifest.config_hash}
    return score(dets, [s.boxes for s in samples], manifest.categories, iou_thr, op_thr, cfg, names)


# ---------------------------------------------------------------- SR inference

@torch.no_grad()
def upscale_tensor(model: Detector, x: torch.Tensor, times: int, batch_size: int = 8) -> torch.Tensor:
    if times < 1:
        raise ValueError("times must be >= 1")
    if model.sr is None:
        raise ValueError("checkpoint has no SR branch")
    model.eval()
    for _ in range(times):
        x = torch.cat([model.upscale(x[i:i + batch_size]) for i in range(0, x.shape[0], batch_size)])
    return x


def upscale_recursive(img: GrayImage, checkpoint, times: int) -> GrayImage:
    """Apply the SR branch ``times`` times: side grows by 2**times."""
    model = _model_of(checkpoint)
    if img.height % model.cfg.divisor or img.width % model.cfg.divisor:
        raise ValueError(f"image side must be divisible by {model.cfg.divisor}")
    out = upscale_tensor(model, images_to_tensor([img]), times)
    return GrayImage.from_array(out[0, 0].numpy())


def upscale_then_detect(lr_manifest: DatasetManifest, sr_checkpoint, detector_checkpoint,
                        conf_thr: float = 0.001, nms_thr: float = 0.5, split: str | None = None,
                        op_thr: float = 0.25) -> EvalReport:
    """Upscale LR images with the SR branch, then score them with a detector at the target side."""
    sr_model = _model_of(sr_checkpoint)
    det = _model_of(detector_checkpoint)
    samples, names = _load_split(lr_manifest, split)
    if not samples:
        raise DataError("no images to evaluate")
    lr_side = samples[0].image.height
    ratio = det.cfg.input_size / lr_side
    times = int(round(math.log2(ratio))) if ratio >= 2 else 0
    if times < 1 or lr_side * 2**times != det.cfg.input_size:
        raise ValueError(f"detector side {det.cfg.input_size} is not a power-of-two multiple of LR side {lr_side}")
    up = upscale_tensor(sr_model, images_to_tensor([s.image for s in samples]), times)
    _check_side(det, up.shape[-1])
    dets = predict(det, up, conf_thr, nms_thr)
    cfg = {"conf_thr": conf_thr, "nms_thr": nms_thr, "split": split, "upscale_times": times,
           "lr_side": lr_side, "dataset": str(lr_manifest.root)}
    return score(dets, [s.boxes for s in samples], lr_manifest.categories, 0.5, op_thr, cfg, names)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return float("inf") if mse == 0 else 10.0 * math.log10(1.0 / mse)


# ---------------------------------------------------------------- zero-shot

@dataclass
class ZeroShotResult:
    reports: dict[float, EvalReport]
    detection_counts: dict[float, int]

    def to_dict(self) -> dict:
        return {
            "thresholds": sorted(self.reports),
            "detection_counts": {str(t): n for t, n in sorted(self.detection_counts.items())},
            "reports": {str(t): r.to_dict() for t, r in sorted(self.reports.items())},
        }


def zero_shot_eval(checkpoint, manifest: DatasetManifest, thresholds=(0.1, 0.2, 0.3, 0.5),
                   nms_thr: float = 0.5, split: str | None = None) -> ZeroShotResult:
    """Per-threshold reports on a process-shifted set.

    Inference runs once; each threshold filters the same NMS output, so counts
    cannot grow as the threshold rises.
    """
    thresholds = sorted(float(t) for t in thresholds)
    if not thresholds:
        raise ValueError("at least one threshold required")
    model = _model_of(checkpoint)
    samples, names = _load_split(manifest, split)
    if not samples:
        raise DataError("no images to evaluate")
    _check_side(model, samples[0].image.height)
    base = predict(model, [s.image for s in samples], min(thresholds), nms_thr)
    gts = [s.boxes for s in samples]
    reports, counts = {}, {}
    for t in thresholds:
        dets = [[d for d in img if d.confidence >= t] for img in base]
        counts[t] = sum(len(d) for d in dets)
        reports[t] = score(dets, gts, manifest.categories, 0.5, t,
                           {"conf_thr": t, "nms_thr": nms_thr, "dataset": str(manifest.root)}, names)
    return ZeroShotResult(reports, counts)


# ---------------------------------------------------------------- throughput

@dataclass(frozen=True)
class TimeModel:
    """Imaging time linear in image side: ``t = slope * side + intercept`` (seconds)."""

    slope: float
    intercept: float = 0.0

    def time(self, side: float) -> float:
        return self.slope * side + self.intercept


def fit_time_model(points) -> TimeModel:
    """Least-squares line through ``(side, seconds)`` points; one point fits through the origin."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) == 1:
        return TimeModel(pts[0, 1] / pts[0, 0], 0.0)
    slope, intercept = np.polyfit(pts[:, 0], pts[:, 1], 1)
    return TimeModel(float(slope), float(intercept))


# time proportional to side, anchored so a 512 image takes one time unit
DEFAULT_TIME_MODEL = TimeModel(slope=1.0 / 512, intercept=0.0)


def throughput_report(resolutions, time_model: TimeModel | tuple = DEFAULT_TIME_MODEL) -> list[dict]:
    """Imaging-time ratio and throughput multiplier for every (high, low) resolution pair."""
    if not isinstance(time_model, TimeModel):
        time_model = TimeModel(*time_model)
    res = sorted({int(r) for r in resolutions}, reverse=True)
    rows = []
    for i, hi in enumerate(res):
        for lo in res[i:]:
            t_hi, t_lo = time_model.time(hi), time_model.time(lo)
            if t_lo <= 0:
                raise ValueError(f"time model gives non-positive time at side {lo}")
            ratio = t_hi / t_lo
            rows.append({"high": hi, "low": lo, "time_high": t_hi, "time_low": t_lo,
                         "time_ratio": ratio, "throughput_multiplier": ratio})
    return rows
