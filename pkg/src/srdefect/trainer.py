"""Seeded training loops for the baseline detector and the SR-assisted model."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch

from .core import BBox, DataError
from .datasetprep import PairManifest
from .evaluator import predict, score
from .manifest import DatasetManifest
from .model import Checkpoint, Detector, ModelConfig, detection_loss, joint_loss, sr_loss

METRIC_FIELDS = ("step", "epoch", "stage", "det_loss", "sr_loss", "lr", "val_mAP")


class TrainingDivergence(RuntimeError):
    """Raised when a loss becomes non-finite."""


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 2e-3
    warmup_steps: int = 50
    min_lr_ratio: float = 0.05
    weight_decay: float = 1e-4
    seed: int = 0
    sr_loss_weight: float = 1.0
    scales: list[int] | None = None  # LR sides of the pair stages to train on; None = all
    augment_manifest: str | None = None  # extra detection-only samples (augmented LR images)
    eval_every: int = 0  # epochs between val mAP evaluations; 0 = only after the last epoch
    checkpoint_dir: str | None = None
    max_steps: int | None = None
    flips: bool = False
    grad_clip: float = 10.0
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.sr_loss_weight < 0:
            raise ValueError("sr_loss_weight must be >= 0")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be > 0 and weight_decay >= 0")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown TrainConfig keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class StageData:
    name: str
    images: torch.Tensor  # (N, 1, S, S)
    boxes: list[list[BBox]]
    hr: torch.Tensor | None = None  # (N, 1, 2S, 2S) when SR targets exist

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def side(self) -> int:
        return self.images.shape[-1]


def _stack(images) -> torch.Tensor:
    return torch.from_numpy(np.stack([im.pixels for im in images])[:, None].copy())


def stage_from_manifest(manifest: DatasetManifest, split: str, name: str | None = None) -> StageData:
    sub = manifest.split(split)
    samples = [sub.load_sample(i) for i in range(len(sub))]
    if not samples:
        raise DataError(f"manifest has no {split!r} samples")
    return StageData(name or f"{split}@{samples[0].image.height}", _stack([s.image for s in samples]),
                     [s.boxes for s in samples])


def stages_from_pairs(pairs: PairManifest, split: str, scales=None) -> list[StageData]:
    """One stage per (HR, LR) chain step, highest resolution first."""
    out = []
    for hr_res, lr_res in pairs.stages:
        if scales is not None and lr_res not in scales:
            continue
        sub = pairs.filter(split, (hr_res, lr_res))
        if not len(sub):
            continue
        loaded = [sub.load_pair(i) for i in range(len(sub))]
        out.append(StageData(f"{hr_res}->{lr_res}", _stack([p.lr for p in loaded]),
                             [p.boxes for p in loaded], _stack([p.hr for p in loaded])))
    if not out:
        raise DataError(f"no {split!r} pairs for scales {scales}")
    return out


def schedule(n_stages_batches: list[int]) -> list[int]:
    """Round-robin stage order: one batch per stage in turn until each is exhausted."""
    order, left = [], list(n_stages_batches)
    while any(left):
        for k in range(len(left)):
            if left[k]:
                order.append(k)
                left[k] -= 1
    return order


def lr_factor(step: int, total: int, warmup: int, min_ratio: float) -> float:
    """Linear warmup then cosine decay to ``min_ratio``."""
    if warmup and step < warmup:
        return (step + 1) / warmup
    t = (step - warmup) / max(1, total - warmup)
    return min_ratio + (1 - min_ratio) * 0.5 * (1 + math.cos(math.pi * min(1.0, t)))


def _flip_batch(x, hr, boxes, rng: np.random.Generator):
    """Random horizontal/vertical mirrors; line-space patterns are symmetric under both."""
    flips = rng.integers(0, 2, size=(x.shape[0], 2))
    x, hr = x.clone(), (hr.clone() if hr is not None else None)
    out_boxes = []
    for i, (fh, fv) in enumerate(flips):
        dims = [d for d, f in ((-1, fh), (-2, fv)) if f]
        if dims:
            x[i] = torch.flip(x[i], dims)
            if hr is not None:
                hr[i] = torch.flip(hr[i], dims)
        out_boxes.append([
            BBox(b.category, 1 - b.cx if fh else b.cx, 1 - b.cy if fv else b.cy, b.w, b.h) for b in boxes[i]
        ])
    return x, hr, out_boxes


def evaluate_stage(model: Detector, stage: StageData, categories, conf_thr=0.001, nms_thr=0.5):
    dets = predict(model, stage.images, conf_thr, nms_thr)
    return score(dets, stage.boxes, categories)


def fit(model: Detector, stages: list[StageData], cfg: TrainConfig, categories: list[str],
        val: StageData | None = None, metrics_path: str | Path | None = None,
        optimizer_state: dict | None = None, log=None) -> tuple[Checkpoint, list[dict]]:
    """Shared optimisation loop; stages are interleaved round-robin within each epoch."""
    torch.set_num_threads(cfg.threads)
    lam = cfg.sr_loss_weight if model.sr is not None else 0.0
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7]))
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    if optimizer_state:
        opt.load_state_dict(optimizer_state)
    per_epoch = [math.ceil(len(s) / cfg.batch_size) for s in stages]
    total = sum(per_epoch) * cfg.epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    history: list[dict] = []
    writer = None
    fh = None
    if metrics_path is not None:
        Path(metrics_path).parent.mkdir(parents=True, exist_ok=True)
        fh = open(metrics_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
        writer.writeheader()
    step = 0
    t0 = time.time()
    try:
        for epoch in range(cfg.epochs):
            if step >= total:
                break
            model.train()
            epoch_start = len(history)
            perms = [rng.permutation(len(s)) for s in stages]
            cursor = [0] * len(stages)
            for k in schedule(per_epoch):
                if step >= total:
                    break
                st = stages[k]
                idx = perms[k][cursor[k]:cursor[k] + cfg.batch_size]
                cursor[k] += cfg.batch_size
                it = torch.from_numpy(idx)
                x = st.images[it]
                hr = st.hr[it] if st.hr is not None else None
                boxes = [st.boxes[i] for i in idx]
                if cfg.flips:
                    x, hr, boxes = _flip_batch(x, hr, boxes, rng)
                for g in opt.param_groups:
                    g["lr"] = cfg.lr * lr_factor(step, total, cfg.warmup_steps, cfg.min_lr_ratio)
                use_sr = lam > 0 and hr is not None
                if use_sr:
                    raw, sr_out = model(x, with_sr=True)
                    s_l = sr_loss(sr_out, hr)
                else:
                    raw = model(x)
                    s_l = None
                d_l = detection_loss(raw, boxes, model.cfg, st.side)
                loss = joint_loss(d_l, s_l, lam) if use_sr else d_l
                if not torch.isfinite(loss):
                    raise TrainingDivergence(f"non-finite loss at step {step} (det={d_l.item()})")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                if cfg.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                row = {"step": step, "epoch": epoch, "stage": st.name, "det_loss": d_l.item(),
                       "sr_loss": s_l.item() if s_l is not None else "", "lr": opt.param_groups[0]["lr"],
                       "val_mAP": ""}
                step += 1
                history.append(row)
            last = epoch == cfg.epochs - 1 or step >= total
            if val is not None and (last or (cfg.eval_every and (epoch + 1) % cfg.eval_every == 0)):
                m = evaluate_stage(model, val, categories).mAP
                history[-1]["val_mAP"] = m
            if writer:
                writer.writerows(history[epoch_start:])
                fh.flush()
            if log:
                log(f"epoch {epoch} step {step} det {history[-1]['det_loss']:.4f} "
                    f"sr {history[-1]['sr_loss']} val {history[-1]['val_mAP']} {time.time() - t0:.0f}s")
            if cfg.checkpoint_dir:
                Checkpoint.from_model(model, step=step, optimizer_state=opt.state_dict(),
                                      provenance={"train": cfg.to_dict()}).save(
                    Path(cfg.checkpoint_dir) / "last.pt")
    finally:
        if fh:
            fh.close()
    model.eval()
    ckpt = Checkpoint.from_model(model, step=step, optimizer_state=opt.state_dict(),
                                 provenance={"train": cfg.to_dict(), "categories": list(categories),
                                             "final_det_loss": history[-1]["det_loss"] if history else None})
    ckpt.history = history
    return ckpt, history


def _build(model_cfg: ModelConfig, seed: int) -> Detector:
    torch.manual_seed(seed)
    return Detector(model_cfg)


def train_sr_assisted(pairs: PairManifest, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
                      metrics_path=None, log=None) -> Checkpoint:
    """Joint detection + SR training on (LR, HR, boxes) pairs across chain stages."""
    stages = stages_from_pairs(pairs, "train", cfg.scales)
    side = min(s.side for s in stages)
    model_cfg = model_cfg or ModelConfig(input_size=side, num_categories=len(pairs.categories))
    model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "sr_enabled": True,
                                       "sr_loss_weight": cfg.sr_loss_weight, "input_size": side})
    if cfg.augment_manifest:
        extra = DatasetManifest.load(cfg.augment_manifest)
        stages.append(stage_from_manifest(extra, "train", name=f"aug@{side}"))
    val = _val_stage_pairs(pairs, side)
    model = _build(model_cfg, cfg.seed)
    ckpt, _ = fit(model, stages, cfg, pairs.categories, val, metrics_path, log=log)
    return ckpt


def _val_stage_pairs(pairs: PairManifest, side: int) -> StageData | None:
    sub = [e for e in pairs.entries if e.split == "val" and e.lr_res == side]
    if not sub:
        return None
    pm = PairManifest(sub, pairs.chain, pairs.categories, pairs.source_manifest, pairs.root)
    loaded = [pm.load_pair(i) for i in range(len(pm))]
    return StageData(f"val@{side}", _stack([p.lr for p in loaded]), [p.boxes for p in loaded])


def train_baseline(manifest: DatasetManifest, cfg: TrainConfig, model_cfg: ModelConfig | None = None,
                   metrics_path=None, log=None) -> Checkpoint:
    """Detection-only training at a single resolution (no SR branch, lambda forced to 0)."""
    if len(manifest.resolutions) != 1:
        raise DataError(f"baseline training needs one resolution, got {sorted(manifest.resolutions)}")
    side = next(iter(manifest.resolutions))
    model_cfg = model_cfg or ModelConfig(input_size=side, num_categories=len(manifest.categories))
    model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "sr_enabled": False, "sr_loss_weight": 0.0,
                                       "input_size": side})
    cfg = TrainConfig.from_dict({**cfg.to_dict(), "sr_loss_weight": 0.0})
    stages = [stage_from_manifest(manifest, "train")]
    if cfg.augment_manifest:
        extra = DatasetManifest.load(cfg.augment_manifest)
        stages.append(stage_from_manifest(extra, "train", name=f"aug@{side}"))
    val = stage_from_manifest(manifest, "val") if manifest.split("val").entries else None
    model = _build(model_cfg, cfg.seed)
    ckpt, _ = fit(model, stages, cfg, manifest.categories, val, metrics_path, log=log)
    return ckpt
