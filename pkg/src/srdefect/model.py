"""Compact staged detector with an SR-assisted encoder-decoder branch.

The SR branch reads the stage-1 (low-level) and stage-3 (high-level) backbone
outputs and reconstructs the input at twice its side; its L1 error against the
true HR image is added to the detection loss.
"""

from __future__ import annotations

import io
import json
import math
import pickle
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import BBox, DataError, Detection

CKPT_FORMAT = "srdefect-checkpoint/1"


@dataclass
class ModelConfig:
    num_stages: int = 4
    stage_channels: tuple[int, ...] = (16, 32, 64, 128)
    sr_tap_low: int = 1
    sr_tap_high: int = 3
    sr_scale: int = 2
    head_stages: tuple[int, ...] = (2, 3, 4)
    neck_channels: int = 48
    sr_channels: tuple[int, ...] = (32, 32, 16)
    num_categories: int = 5
    sr_loss_weight: float = 1.0
    sr_enabled: bool = True
    input_size: int = 128
    # box max-side ranges (input pixels) handled by each head level, in units of stride
    level_ranges: tuple[tuple[float, float], ...] = ((0.0, 8.0), (4.0, 8.0), (4.0, 1e9))
    box_weight: float = 5.0
    obj_prior: float = 0.01

    def __post_init__(self):
        self.stage_channels = tuple(self.stage_channels)
        self.head_stages = tuple(self.head_stages)
        self.sr_channels = tuple(self.sr_channels)
        self.level_ranges = tuple(tuple(r) for r in self.level_ranges)
        if len(self.stage_channels) != self.num_stages:
            raise ValueError("stage_channels must list one width per stage")
        if not 1 <= self.sr_tap_low < self.sr_tap_high <= self.num_stages:
            raise ValueError("need 1 <= sr_tap_low < sr_tap_high <= num_stages")
        if self.sr_scale != 2:
            raise ValueError("the SR branch upsamples by exactly 2")
        if self.sr_loss_weight < 0:
            raise ValueError("sr_loss_weight must be >= 0")
        if len(self.level_ranges) != len(self.head_stages):
            raise ValueError("one level range per head stage")
        if self.input_size % self.divisor:
            raise ValueError(f"input_size must be divisible by {self.divisor}")

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(2**s for s in self.head_stages)

    @property
    def divisor(self) -> int:
        return 32

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (list(map(list, v)) if k == "level_ranges" else list(v) if isinstance(v, tuple) else v)
                for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys {sorted(unknown)}")
        return cls(**d)


class ConvNormAct(nn.Sequential):
    def __init__(self, cin, cout, k=3, stride=1):
        super().__init__(
            nn.Conv2d(cin, cout, k, stride, k // 2, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


class ResidualPair(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.a = ConvNormAct(c, c)
        self.b = nn.Sequential(nn.Conv2d(c, c, 3, 1, 1, bias=False), nn.BatchNorm2d(c))

    def forward(self, x):
        return F.relu(x + self.b(self.a(x)))


class Backbone(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = (1,) + cfg.stage_channels
        self.stages = nn.ModuleList(
            nn.Sequential(ConvNormAct(chans[i], chans[i + 1], 3, 2), ResidualPair(chans[i + 1]))
            for i in range(cfg.num_stages)
        )
        self.divisor = cfg.divisor

    def forward(self, x):
        if x.shape[-1] % self.divisor or x.shape[-2] % self.divisor:
            raise ValueError(f"input sides {tuple(x.shape[-2:])} must be divisible by {self.divisor}")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class Neck(nn.Module):
    """Top-down fusion of the head stages into equal-width maps."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.neck_channels
        self.lateral = nn.ModuleList(ConvNormAct(cfg.stage_channels[s - 1], c, 1) for s in cfg.head_stages)
        self.smooth = nn.ModuleList(ConvNormAct(c, c, 3) for _ in cfg.head_stages)

    def forward(self, feats):
        lat = [m(f) for m, f in zip(self.lateral, feats)]
        out = [None] * len(lat)
        top = lat[-1]
        out[-1] = self.smooth[-1](top)
        for i in range(len(lat) - 2, -1, -1):
            top = lat[i] + F.interpolate(top, size=lat[i].shape[-2:], mode="nearest")
            out[i] = self.smooth[i](top)
        return out


class Head(nn.Module):
    """Shared anchor-free head: 4 side distances, objectness, category logits."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.neck_channels
        self.stem = ConvNormAct(c, c, 3)
        self.pred = nn.Conv2d(c, 5 + cfg.num_categories, 1)
        prior = -math.log((1 - cfg.obj_prior) / cfg.obj_prior)
        with torch.no_grad():
            self.pred.bias.zero_()
            self.pred.bias[4] = prior
            self.pred.bias[5:] = -2.0

    def forward(self, levels):
        return [self.pred(self.stem(x)) for x in levels]


class SRBranch(nn.Module):
    """Encoder-decoder reconstructing a 2x image from two backbone taps."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c_low = cfg.stage_channels[cfg.sr_tap_low - 1]
        c_high = cfg.stage_channels[cfg.sr_tap_high - 1]
        e1, e2, d1 = cfg.sr_channels
        self.encoder = nn.Sequential(ConvNormAct(c_low + c_high, e1, 1), ConvNormAct(e1, e2, 3))
        # the low tap sits at input/2^k; k+1 transposed x2 blocks reach 2x the input,
        # the last one emitting the single output channel directly
        n_up = cfg.sr_tap_low + 1
        blocks, cin = [], e2
        for _ in range(n_up - 1):
            blocks.append(nn.Sequential(nn.ConvTranspose2d(cin, d1, 4, 2, 1, bias=False),
                                        nn.BatchNorm2d(d1), nn.ReLU(inplace=True)))
            cin = d1
        self.decoder = nn.Sequential(*blocks)
        self.out = nn.ConvTranspose2d(cin, 1, 4, 2, 1)

    def forward(self, low, high):
        if low.shape[0] != high.shape[0]:
            raise ValueError("SR taps come from different batches")
        high = F.interpolate(high, size=low.shape[-2:], mode="bilinear", align_corners=False)
        x = self.encoder(torch.cat([low, high], dim=1))
        return torch.sigmoid(self.out(self.decoder(x)))


class Detector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg)
        self.neck = Neck(cfg)
        self.head = Head(cfg)
        # built last so backbone/head initialisation does not depend on the flag
        self.sr = SRBranch(cfg) if cfg.sr_enabled else None

    def features(self, x):
        return self.backbone(x)

    def detect(self, feats):
        picked = [feats[s - 1] for s in self.cfg.head_stages]
        return self.head(self.neck(picked))

    def super_resolve(self, feats):
        if self.sr is None:
            raise RuntimeError("model was built without an SR branch")
        return self.sr(feats[self.cfg.sr_tap_low - 1], feats[self.cfg.sr_tap_high - 1])

    def forward(self, x, with_sr: bool = False):
        feats = self.features(x)
        raw = self.detect(feats)
        if with_sr:
            return raw, self.super_resolve(feats)
        return raw

    @torch.no_grad()
    def upscale(self, x):
        return self.super_resolve(self.features(x))


def backbone_forward(images: torch.Tensor, model: Detector) -> list[torch.Tensor]:
    return model.features(images)


def detect_head(features: list[torch.Tensor], model: Detector) -> list[torch.Tensor]:
    return model.detect(features)


def sr_branch(low: torch.Tensor, high: torch.Tensor, model: Detector) -> torch.Tensor:
    return model.sr(low, high)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------- decoding

def _grid(h, w, stride, device, dtype):
    ys = (torch.arange(h, device=device, dtype=dtype) + 0.5) * stride
    xs = (torch.arange(w, device=device, dtype=dtype) + 0.5) * stride
    return torch.meshgrid(ys, xs, indexing="ij")


def decode_boxes(raw: torch.Tensor, stride: int, image_side: int) -> torch.Tensor:
    """Normalized xyxy boxes ``(B, H, W, 4)`` from one level's raw output."""
    b, _, h, w = raw.shape
    gy, gx = _grid(h, w, stride, raw.device, raw.dtype)
    d = F.softplus(raw[:, :4]) * stride
    x0 = (gx - d[:, 0]) / image_side
    y0 = (gy - d[:, 1]) / image_side
    x1 = (gx + d[:, 2]) / image_side
    y1 = (gy + d[:, 3]) / image_side
    return torch.stack([x0, y0, x1, y1], dim=-1)


def decode_arrays(raw: list[torch.Tensor], cfg: ModelConfig, image_side: int, conf_thr: float,
                  max_det: int = 300):
    """Per-image ``(boxes xyxy, scores, labels)`` numpy arrays above ``conf_thr``."""
    per_level = []
    for r, stride in zip(raw, cfg.strides):
        boxes = decode_boxes(r, stride, image_side).clamp(0.0, 1.0)
        obj = torch.sigmoid(r[:, 4])
        cls_p, cls_i = torch.sigmoid(r[:, 5:]).max(dim=1)
        conf = obj * cls_p
        b = r.shape[0]
        per_level.append((boxes.reshape(b, -1, 4), conf.reshape(b, -1), cls_i.reshape(b, -1)))
    boxes = torch.cat([p[0] for p in per_level], dim=1).double().cpu().numpy()
    conf = torch.cat([p[1] for p in per_level], dim=1).double().cpu().numpy()
    labels = torch.cat([p[2] for p in per_level], dim=1).cpu().numpy()
    out = []
    for i in range(boxes.shape[0]):
        keep = (conf[i] >= conf_thr) & (conf[i] > 0)
        keep &= (boxes[i, :, 2] > boxes[i, :, 0]) & (boxes[i, :, 3] > boxes[i, :, 1])
        idx = np.flatnonzero(keep)
        if idx.size > max_det:
            idx = idx[np.argsort(-conf[i, idx], kind="stable")[:max_det]]
        out.append((boxes[i, idx], conf[i, idx], labels[i, idx].astype(np.int64)))
    return out


def arrays_to_detections(boxes, scores, labels) -> list[Detection]:
    return [
        Detection(BBox.from_xyxy(int(l), *b), float(min(1.0, max(0.0, s))))
        for b, s, l in zip(boxes, scores, labels)
    ]


def decode(raw: list[torch.Tensor], conf_thr: float, cfg: ModelConfig, image_side: int | None = None) -> list[list[Detection]]:
    """Detections per image: confidence = objectness x best category probability."""
    if not 0.0 <= conf_thr <= 1.0:
        raise ValueError("conf_thr must lie in [0, 1]")
    side = image_side or raw[0].shape[-1] * cfg.strides[0]
    if conf_thr >= 1.0:
        return [[] for _ in range(raw[0].shape[0])]
    return [arrays_to_detections(*a) for a in decode_arrays(raw, cfg, side, conf_thr, max_det=10**9)]


# ---------------------------------------------------------------- losses

def sr_loss(sr_out: torch.Tensor, hr: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between reconstruction and HR image."""
    if sr_out.shape != hr.shape:
        raise ValueError(f"shape mismatch: {tuple(sr_out.shape)} vs {tuple(hr.shape)}")
    return (sr_out - hr).abs().mean()


def joint_loss(det_loss: torch.Tensor, sr_l, lam: float) -> torch.Tensor:
    return det_loss + lam * sr_l


def _giou(p: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    ix0, iy0 = torch.maximum(p[:, 0], t[:, 0]), torch.maximum(p[:, 1], t[:, 1])
    ix1, iy1 = torch.minimum(p[:, 2], t[:, 2]), torch.minimum(p[:, 3], t[:, 3])
    inter = (ix1 - ix0).clamp(min=0) * (iy1 - iy0).clamp(min=0)
    ap = (p[:, 2] - p[:, 0]) * (p[:, 3] - p[:, 1])
    at = (t[:, 2] - t[:, 0]) * (t[:, 3] - t[:, 1])
    union = ap + at - inter
    iou = inter / union
    cx0, cy0 = torch.minimum(p[:, 0], t[:, 0]), torch.minimum(p[:, 1], t[:, 1])
    cx1, cy1 = torch.maximum(p[:, 2], t[:, 2]), torch.maximum(p[:, 3], t[:, 3])
    hull = (cx1 - cx0) * (cy1 - cy0)
    return iou - (hull - union) / hull


@dataclass
class Targets:
    """Center-cell assignments per level: (batch, row, col) indices plus targets."""

    index: list[tuple[torch.Tensor, torch.Tensor, torch.Tensor]]
    boxes: list[torch.Tensor]
    labels: list[torch.Tensor]


def assign_targets(gts: list[list[BBox]], cfg: ModelConfig, image_side: int,
                   shapes: list[tuple[int, int]]) -> Targets:
    """Each GT goes to the cell holding its center on every level whose size range covers it.

    When two GTs claim one cell the smaller box wins.
    """
    index, boxes, labels = [], [], []
    for (h, w), stride, (lo, hi) in zip(shapes, cfg.strides, cfg.level_ranges):
        claims: dict[tuple[int, int, int], tuple[float, BBox]] = {}
        for bi, img_boxes in enumerate(gts):
            for g in img_boxes:
                side = max(g.w, g.h) * image_side / stride
                if not lo < side <= hi and not (lo == 0 and side <= hi):
                    continue
                r = min(h - 1, int(g.cy * h))
                c = min(w - 1, int(g.cx * w))
                key = (bi, r, c)
                if key not in claims or g.area < claims[key][0]:
                    claims[key] = (g.area, g)
        keys = sorted(claims)
        index.append(tuple(torch.tensor([k[i] for k in keys], dtype=torch.long) for i in range(3)))
        boxes.append(torch.tensor([claims[k][1].xyxy() for k in keys], dtype=torch.float32).reshape(-1, 4))
        labels.append(torch.tensor([claims[k][1].category for k in keys], dtype=torch.long))
    return Targets(index, boxes, labels)


def detection_loss(raw: list[torch.Tensor], gts: list[list[BBox]], cfg: ModelConfig,
                   image_side: int | None = None, return_parts: bool = False):
    """GIoU box loss + BCE objectness (all cells) + BCE categories (positive cells).

    Every term is normalised by the number of positive cells (at least 1).
    """
    side = image_side or raw[0].shape[-1] * cfg.strides[0]
    tg = assign_targets(gts, cfg, side, [tuple(r.shape[-2:]) for r in raw])
    n_pos = sum(len(l) for l in tg.labels)
    norm = max(n_pos, 1)
    dtype = raw[0].dtype
    obj_l = raw[0].new_zeros(())
    box_l = raw[0].new_zeros(())
    cls_l = raw[0].new_zeros(())
    for r, stride, (bi, ri, ci), tbox, tlab in zip(raw, cfg.strides, tg.index, tg.boxes, tg.labels):
        obj_t = torch.zeros_like(r[:, 4])
        if len(tlab):
            obj_t[bi, ri, ci] = 1.0
            pred = decode_boxes(r, stride, side)[bi, ri, ci]
            box_l = box_l + (1.0 - _giou(pred, tbox.to(dtype))).sum()
            logits = r[:, 5:].permute(0, 2, 3, 1)[bi, ri, ci]
            onehot = F.one_hot(tlab, cfg.num_categories).to(dtype)
            cls_l = cls_l + F.binary_cross_entropy_with_logits(logits, onehot, reduction="sum")
        obj_l = obj_l + F.binary_cross_entropy_with_logits(r[:, 4], obj_t, reduction="sum")
    total = (cfg.box_weight * box_l + obj_l + cls_l) / norm
    if return_parts:
        return total, {"box": float(box_l / norm), "obj": float(obj_l / norm), "cls": float(cls_l / norm), "n_pos": n_pos}
    return total


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config: ModelConfig
    state_dict: dict
    step: int = 0
    optimizer_state: dict | None = None
    provenance: dict = field(default_factory=dict)

    def build(self) -> Detector:
        model = Detector(self.config)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format": CKPT_FORMAT,
            "config": json.dumps(self.config.to_dict(), sort_keys=True),
            "provenance": json.dumps(self.provenance, sort_keys=True),
            "step": self.step,
            "parameters": {k: v.detach().cpu() for k, v in self.state_dict.items()},
            "optimizer": self.optimizer_state,
        }
        buf = io.BytesIO()
        torch.save(payload, buf)
        path.write_bytes(buf.getvalue())
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            payload = torch.load(path, map_location="cpu", weights_only=True)
        except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
        if not isinstance(payload, dict) or payload.get("format") != CKPT_FORMAT:
            raise DataError(f"{path}: not a checkpoint (format tag missing)")
        cfg = ModelConfig.from_dict(json.loads(payload["config"]))
        return cls(cfg, payload["parameters"], payload["step"], payload.get("optimizer"),
                   json.loads(payload["provenance"]))

    @classmethod
    def from_model(cls, model: Detector, **kw) -> "Checkpoint":
        return cls(model.cfg, {k: v.detach().clone() for k, v in model.state_dict().items()}, **kw)
