"""Box-aware augmentation for line-space SEM samples, with class budgeting.

Every op has the signature ``op(sample, rng, **params) -> Sample``.  Scalar
parameters given as a ``(lo, hi)`` pair are drawn uniformly per call.
Only ``copy_defect`` changes the box list.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from scipy.ndimage import convolve1d, gaussian_filter
from scipy.spatial import ConvexHull

from .core import BBox, DataError, GrayImage, Sample, iou, read_annotations, write_annotations
from .manifest import DatasetManifest, ManifestEntry
from .synthgen import MAX_OVERLAP_IOU, PLACEMENT_RETRIES, PlacementError

log = logging.getLogger(__name__)

PHOTOMETRIC = ("random_shadow", "gauss_noise", "random_fog", "random_brightness",
               "random_gamma", "ringing_overshoot", "contrast_change")
KINDS = PHOTOMETRIC + ("cutout", "copy_defect")


class PlanInfeasible(ValueError):
    """Targets cannot be met exactly from the available samples."""


def _draw(rng: np.random.Generator, value):
    if isinstance(value, (tuple, list)):
        lo, hi = value
        return float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    return value


def _draw_int(rng: np.random.Generator, value) -> int:
    if isinstance(value, (tuple, list)):
        lo, hi = value
        return int(rng.integers(lo, hi + 1))
    return int(value)


def _with_pixels(s: Sample, px: np.ndarray, op: str) -> Sample:
    lineage = list(s.source_meta.get("lineage", [])) + [op]
    return s.replace(image=GrayImage.from_array(px), lineage=lineage)


def _random_convex_polygon(rng, n_vertices: int) -> np.ndarray:
    angles = np.sort(rng.uniform(0, 2 * np.pi, n_vertices))
    radii = rng.uniform(0.6, 1.0, n_vertices)
    pts = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
    try:
        return pts[ConvexHull(pts).vertices]
    except Exception:  # collinear draw
        return np.array([[-1.0, -1.0], [1.0, -1.0], [0.0, 1.0]])


def _polygon_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, 1)) - np.dot(y, np.roll(x, 1)))


def shadow_polygon(shape: tuple[int, int], rng: np.random.Generator,
                   area_frac=(0.05, 0.25), vertices=(3, 7)) -> np.ndarray:
    """Boolean mask of one random convex polygon covering ``area_frac`` of the image."""
    h, w = shape
    target = _draw(rng, area_frac) * h * w
    for _ in range(20):
        pts = _random_convex_polygon(rng, max(3, _draw_int(rng, vertices)))
        if len(pts) < 3:
            continue
        pts = pts * math.sqrt(target / _polygon_area(pts))
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        span = hi - lo
        if span[0] <= w and span[1] <= h:
            break
    else:
        pts = pts * min(w / span[0], h / span[1])
        lo, hi = pts.min(axis=0), pts.max(axis=0)
        span = hi - lo
    ox = rng.uniform(0, w - span[0]) - lo[0]
    oy = rng.uniform(0, h - span[1]) - lo[1]
    canvas = Image.new("L", (w, h), 0)
    ImageDraw.Draw(canvas).polygon([(float(x + ox), float(y + oy)) for x, y in pts], fill=1)
    return np.asarray(canvas, dtype=bool)


def random_shadow(s: Sample, rng: np.random.Generator, darken=(0.5, 0.8),
                  area_frac=(0.05, 0.25), vertices=(3, 7)) -> Sample:
    factor = _draw(rng, darken)
    mask = shadow_polygon(s.image.shape, rng, area_frac, vertices)
    px = s.image.pixels.astype(np.float64)
    px[mask] *= factor
    return _with_pixels(s, px, "random_shadow")


def gauss_noise(s: Sample, rng: np.random.Generator, sigma=(0.01, 0.05)) -> Sample:
    sigma = _draw(rng, sigma)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return s.replace()
    px = s.image.pixels.astype(np.float64) + rng.normal(0.0, sigma, s.image.shape)
    return _with_pixels(s, px, "gauss_noise")


def fog_disks(shape, rng, count=(1, 3), radius_frac=(0.05, 0.15)) -> list[tuple[float, float, float]]:
    h, w = shape
    out = []
    for _ in range(_draw_int(rng, count)):
        r = _draw(rng, radius_frac) * min(h, w)
        out.append((float(rng.uniform(0, h)), float(rng.uniform(0, w)), r))
    return out


def random_fog(s: Sample, rng: np.random.Generator, count=(1, 3), radius_frac=(0.05, 0.15),
               alpha=(0.4, 0.8)) -> Sample:
    disks = fog_disks(s.image.shape, rng, count, radius_frac)
    if not disks:
        return s.replace()
    px = s.image.pixels.astype(np.float64)
    yy, xx = np.mgrid[0 : px.shape[0], 0 : px.shape[1]]
    out = px.copy()
    for cy, cx, r in disks:
        a = _draw(rng, alpha)
        blurred = gaussian_filter(px, sigma=max(r / 2, 1.0), mode="reflect")
        d = np.hypot(yy + 0.5 - cy, xx + 0.5 - cx)
        wgt = np.clip((r - d) / max(0.3 * r, 1e-6), 0.0, 1.0) * a
        inside = wgt > 0
        out[inside] = (1 - wgt[inside]) * out[inside] + wgt[inside] * blurred[inside]
    return _with_pixels(s, out, "random_fog")


def random_brightness(s: Sample, rng: np.random.Generator, brightness=(-0.15, 0.15),
                      contrast=(0.8, 1.2)) -> Sample:
    b, c = _draw(rng, brightness), _draw(rng, contrast)
    if b == 0 and c == 1:
        return s.replace()
    return _with_pixels(s, c * s.image.pixels.astype(np.float64) + b, "random_brightness")


def random_gamma(s: Sample, rng: np.random.Generator, gamma=(0.7, 1.5)) -> Sample:
    g = _draw(rng, gamma)
    if g <= 0:
        raise ValueError("gamma must be > 0")
    if g == 1:
        return s.replace()
    return _with_pixels(s, np.power(s.image.pixels.astype(np.float64), g), "random_gamma")


def sinc_kernel(cutoff: float, size: int = 15) -> np.ndarray:
    """Normalized 1-D sinc low-pass taps; ``cutoff`` is a fraction of Nyquist."""
    if not 0 < cutoff <= 1:
        raise ValueError("cutoff must be in (0, 1]")
    if size % 2 == 0 or size < 3:
        raise ValueError("kernel size must be odd and >= 3")
    n = np.arange(size) - size // 2
    taps = cutoff * np.sinc(cutoff * n)
    return taps / taps.sum()


def ringing_overshoot(s: Sample, rng: np.random.Generator, cutoff=(0.25, 0.6),
                      size=(7, 15)) -> Sample:
    k = _draw_int(rng, size) | 1
    taps = sinc_kernel(_draw(rng, cutoff), k)
    px = s.image.pixels.astype(np.float64)
    px = convolve1d(convolve1d(px, taps, axis=0, mode="reflect"), taps, axis=1, mode="reflect")
    return _with_pixels(s, px, "ringing_overshoot")


def _px_rect(box: BBox, h: int, w: int) -> tuple[int, int, int, int]:
    rs, cs = box.pixel_slices(h, w)
    return rs.start, cs.start, rs.stop, cs.stop


def cutout_allowed(rect: tuple[int, int, int, int], boxes: list[BBox], h: int, w: int) -> bool:
    """True if the rectangle covers at most half of every GT box."""
    r0, c0, r1, c1 = rect
    for b in boxes:
        x0, y0, x1, y1 = b.to_pixels(h, w)
        iw = max(0.0, min(c1, x1) - max(c0, x0))
        ih = max(0.0, min(r1, y1) - max(r0, y0))
        if iw * ih > 0.5 * (x1 - x0) * (y1 - y0):
            return False
    return True


def cutout(s: Sample, rng: np.random.Generator, area_frac=(0.02, 0.1), aspect=(0.5, 2.0),
           fill=0.0, retries: int = PLACEMENT_RETRIES) -> Sample:
    h, w = s.image.shape
    for _ in range(retries):
        area = _draw(rng, area_frac) * h * w
        ar = _draw(rng, aspect)
        rh = int(np.clip(round(math.sqrt(area / ar)), 1, h))
        rw = int(np.clip(round(area / rh), 1, w))
        r0 = int(rng.integers(0, h - rh + 1))
        c0 = int(rng.integers(0, w - rw + 1))
        rect = (r0, c0, r0 + rh, c0 + rw)
        if cutout_allowed(rect, s.boxes, h, w):
            px = s.image.pixels.astype(np.float64)
            px[r0 : r0 + rh, c0 : c0 + rw] = fill
            out = _with_pixels(s, px, "cutout")
            out.source_meta["cutout_rect"] = list(rect)
            return out
    log.debug("cutout: no admissible placement, sample unchanged")
    return s.replace()


def estimate_pitch(img: GrayImage, min_lag: int = 2) -> int:
    """Line pitch in pixels from the column-mean autocorrelation peak."""
    prof = img.pixels.astype(np.float64).mean(axis=0)
    prof = prof - prof.mean()
    n = prof.size
    ac = np.correlate(prof, prof, mode="full")[n - 1 :]
    lags = np.arange(min_lag, n // 2)
    return int(lags[np.argmax(ac[lags])])


def _fade_weights(ph: int, pw: int, fade: int) -> np.ndarray:
    def ramp(m):
        d = np.minimum(np.arange(m), np.arange(m)[::-1]) + 1
        return np.minimum(1.0, d / (fade + 1.0))

    if fade <= 0:
        return np.ones((ph, pw))
    return np.minimum(ramp(ph)[:, None], ramp(pw)[None, :])


def _padded(box: BBox, h: int, w: int, pad: int) -> tuple[int, int, int, int]:
    r0, c0, r1, c1 = _px_rect(box, h, w)
    return max(0, r0 - pad), max(0, c0 - pad), min(h, r1 + pad), min(w, c1 + pad)


def _rects_touch(rect: tuple[int, int, int, int], box: BBox, h: int, w: int) -> bool:
    r0, c0, r1, c1 = rect
    b0, bc0, b1, bc1 = _px_rect(box, h, w)
    return r0 < b1 and b0 < r1 and c0 < bc1 and bc0 < c1


def copy_defect(s: Sample, rng: np.random.Generator, copies: int = 1, fade_px: int = 3,
                category: int | None = None, pitch: int | None = None,
                retries: int = PLACEMENT_RETRIES) -> Sample:
    """Paste copies of existing defects at pitch-aligned sites, faded at the edges.

    Horizontal offsets are whole multiples of the pattern pitch, so the pasted
    slice stays in phase with the surrounding lines.
    """
    if not s.boxes:
        raise ValueError("copy_defect needs a sample with at least one box")
    h, w = s.image.shape
    pitch = pitch or estimate_pitch(s.image)
    px = s.image.pixels.astype(np.float64)
    boxes = list(s.boxes)
    sources = [b for b in s.boxes if category is None or b.category == category]
    if not sources:
        raise ValueError(f"no box of category {category} to copy")
    # a patch that reaches into another defect would paste an unlabeled fragment of it
    clean = [b for b in sources if not any(o is not b and _rects_touch(_padded(b, h, w, fade_px), o, h, w)
                                           for o in s.boxes)]
    if clean:
        sources = clean
    else:
        log.debug("copy_defect: every source patch overlaps another defect; copying anyway")
    placed = []
    for _ in range(copies):
        for _attempt in range(retries):
            src = sources[int(rng.integers(len(sources)))]
            r0, c0, r1, c1 = _px_rect(src, h, w)
            pr0, pc0 = max(0, r0 - fade_px), max(0, c0 - fade_px)
            pr1, pc1 = min(h, r1 + fade_px), min(w, c1 + fade_px)
            ph, pw = pr1 - pr0, pc1 - pc0
            m_lo = -(pc0 // pitch)
            m_hi = (w - pc1) // pitch
            shifts = [m for m in range(m_lo, m_hi + 1) if m != 0]
            if not shifts or ph >= h:
                continue
            dx = shifts[int(rng.integers(len(shifts)))] * pitch
            dy = int(rng.integers(-pr0, h - pr1 + 1))
            x0, y0, x1, y1 = src.xyxy()
            new = BBox.from_xyxy(src.category, x0 + dx / w, y0 + dy / h, x1 + dx / w, y1 + dy / h)
            if any(iou(new, b) >= MAX_OVERLAP_IOU or _rects_touch(_px_rect(new, h, w), b, h, w) for b in boxes):
                continue
            wgt = _fade_weights(ph, pw, fade_px)
            patch = s.image.pixels[pr0:pr1, pc0:pc1].astype(np.float64)
            dst = px[pr0 + dy : pr1 + dy, pc0 + dx : pc1 + dx]
            px[pr0 + dy : pr1 + dy, pc0 + dx : pc1 + dx] = wgt * patch + (1 - wgt) * dst
            boxes.append(new)
            placed.append({"src": [pr0, pc0, pr1, pc1], "dx": int(dx), "dy": dy})
            break
        else:
            raise PlacementError(f"copy_defect: no aligned free site after {retries} attempts")
    out = _with_pixels(s, px, "copy_defect").replace(boxes=boxes)
    out.source_meta["copy_sites"] = list(s.source_meta.get("copy_sites", [])) + placed
    out.source_meta["pitch"] = int(pitch)
    return out


def contrast_band_weights(h: int, r0: int, r1: int, ramp_rows: int) -> np.ndarray:
    rows = np.arange(h, dtype=np.float64)
    dist = np.maximum(r0 - rows, rows - (r1 - 1))
    dist = np.maximum(dist, 0)
    if ramp_rows <= 0:
        return (dist == 0).astype(np.float64)
    return np.clip(1.0 - dist / (ramp_rows + 1.0), 0.0, 1.0)


def contrast_change(s: Sample, rng: np.random.Generator, alpha=(0.4, 0.8), beta=(-0.15, 0.0),
                    band_frac=(0.1, 0.4), ramp_rows: int = 4) -> Sample:
    """Flatten and darken one horizontal band of rows."""
    h = s.image.height
    a, b = _draw(rng, alpha), _draw(rng, beta)
    band = max(1, int(round(_draw(rng, band_frac) * h)))
    r0 = int(rng.integers(0, h - band + 1))
    r1 = r0 + band
    px = s.image.pixels.astype(np.float64)
    m = px[r0:r1].mean()
    wgt = contrast_band_weights(h, r0, r1, ramp_rows)[:, None]
    out = px + wgt * ((a - 1.0) * (px - m) + b)
    res = _with_pixels(s, out, "contrast_change")
    res.source_meta["contrast_band"] = [r0, r1]
    return res


OPS = {
    "random_shadow": random_shadow,
    "gauss_noise": gauss_noise,
    "random_fog": random_fog,
    "random_brightness": random_brightness,
    "random_gamma": random_gamma,
    "ringing_overshoot": ringing_overshoot,
    "cutout": cutout,
    "copy_defect": copy_defect,
    "contrast_change": contrast_change,
}


@dataclass
class AugmentOpSpec:
    kind: str
    params: dict = field(default_factory=dict)
    probability: float = 0.3

    def __post_init__(self):
        if self.kind not in OPS:
            raise ValueError(f"unknown augmentation {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must lie in [0, 1]")
        self.params = {k: tuple(v) if isinstance(v, list) else v for k, v in self.params.items()}

    def __call__(self, s: Sample, rng: np.random.Generator) -> Sample:
        return OPS[self.kind](s, rng, **self.params)


def default_pipeline(probability: float = 0.3) -> list[AugmentOpSpec]:
    return [AugmentOpSpec(k, probability=probability) for k in PHOTOMETRIC + ("cutout",)]


@dataclass
class PlanEntry:
    source: int  # index into the manifest entries
    extra: dict = field(default_factory=dict)  # category id -> copy_defect copies


@dataclass
class AugmentPlan:
    targets: dict[str, int]
    originals: dict[str, int]
    entries: list[PlanEntry] = field(default_factory=list)
    pipeline: list[AugmentOpSpec] = field(default_factory=default_pipeline)

    def planned_totals(self, sample_counts: np.ndarray, categories: list[str]) -> dict[str, int]:
        tot = np.array([self.originals[c] for c in categories], dtype=np.int64)
        for e in self.entries:
            tot += sample_counts[e.source]
            for c, k in e.extra.items():
                tot[int(c)] += k
        return dict(zip(categories, tot.tolist()))


def sample_counts(manifest: DatasetManifest) -> np.ndarray:
    """Per-entry instance counts, shape ``(entries, categories)``."""
    out = np.zeros((len(manifest.entries), len(manifest.categories)), dtype=np.int64)
    for i, e in enumerate(manifest.entries):
        for b in read_annotations(manifest.path_of(e.annotation)):
            out[i, b.category] += 1
    return out


MAX_EXTRA_PER_ENTRY = 3


def plan_from_counts(counts: np.ndarray, train_mask: np.ndarray, categories: list[str],
                     targets: dict[str, int], pipeline=None, max_extra: int = MAX_EXTRA_PER_ENTRY) -> AugmentPlan:
    """Greedy exact budget allocation over per-sample instance counts.

    Whole-sample copies are scheduled while they fit inside the remaining
    deficit (a copy credits every category it contains); what no sample fits
    exactly is topped up with extra ``copy_defect`` instances on scheduled
    copies that already contain the category.
    """
    train = np.flatnonzero(train_mask)
    orig = counts[train].sum(axis=0)
    tgt = np.array([targets.get(c, int(o)) for c, o in zip(categories, orig)], dtype=np.int64)
    unknown = set(targets) - set(categories)
    if unknown:
        raise ValueError(f"targets name unknown categories {sorted(unknown)}")
    if np.any(tgt < orig):
        bad = [c for c, t, o in zip(categories, tgt, orig) if t < o]
        raise ValueError(f"targets below original counts for {bad}")
    deficit = tgt - orig
    for c, d, o in zip(categories, deficit, orig):
        if d > 0 and o == 0:
            raise PlanInfeasible(f"category {c!r} has no original instances to augment")

    cand = counts[train]
    uses = np.zeros(len(train), dtype=np.int64)
    contrib = cand.sum(axis=1)
    entries: list[PlanEntry] = []
    while deficit.sum() > 0:
        fits = np.all(cand <= deficit, axis=1) & (contrib > 0)
        if not fits.any():
            break
        idx = np.flatnonzero(fits)
        # spread copies over sources first, then prefer the largest contribution
        key = np.lexsort((idx, -contrib[idx], uses[idx]))
        j = int(idx[key[0]])
        entries.append(PlanEntry(int(train[j])))
        uses[j] += 1
        deficit -= cand[j]

    for c in np.flatnonzero(deficit > 0):
        holders = [e for e in entries if counts[e.source, c] > 0]
        if not holders:
            raise PlanInfeasible(f"cannot meet target for {categories[c]!r} exactly")
        need = int(deficit[c])
        if need > max_extra * len(holders):
            raise PlanInfeasible(f"cannot top up {categories[c]!r} by {need} instances")
        k = 0
        while need > 0:
            e = holders[k % len(holders)]
            e.extra[int(c)] = e.extra.get(int(c), 0) + 1
            need -= 1
            k += 1
        deficit[c] = 0

    plan = AugmentPlan(
        targets=dict(zip(categories, tgt.tolist())),
        originals=dict(zip(categories, orig.tolist())),
        entries=entries,
        pipeline=list(pipeline) if pipeline is not None else default_pipeline(),
    )
    totals = plan.planned_totals(counts, categories)
    if totals != plan.targets:
        raise PlanInfeasible(f"allocation mismatch: planned {totals}, targets {plan.targets}")
    return plan


def plan_budgets(manifest: DatasetManifest, targets: dict[str, int], pipeline=None) -> AugmentPlan:
    """Schedule augmented copies of train samples so category totals hit ``targets``."""
    counts = sample_counts(manifest)
    mask = np.array([e.split == "train" for e in manifest.entries], dtype=bool)
    return plan_from_counts(counts, mask, list(manifest.categories), targets, pipeline)


def augment_sample(s: Sample, pipeline: list[AugmentOpSpec], extra: dict, rng: np.random.Generator) -> Sample:
    for cat, k in sorted(extra.items()):
        s = copy_defect(s, rng, copies=int(k), category=int(cat))
    for op in pipeline:
        if op.kind == "copy_defect":
            continue  # instance counts are owned by the plan
        if rng.random() < op.probability:
            s = op(s, rng)
    return s


def apply_plan(manifest: DatasetManifest, plan: AugmentPlan, seed: int, out_dir: str | Path,
               attempts: int = 5) -> DatasetManifest:
    """Write the planned augmented samples and a combined manifest to ``out_dir``.

    Non-train entries pass through unchanged.
    """
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out_dir}: {exc}") from exc
    for e in plan.entries:
        if manifest.entries[e.source].split != "train":
            raise ValueError("augmentation plans may only reference train samples")
    base = manifest.rebased(out_dir)
    new_entries: list[ManifestEntry] = []
    per_source: dict[int, int] = {}
    for k, pe in enumerate(plan.entries):
        src_entry = manifest.entries[pe.source]
        sample = manifest.load_sample(pe.source)
        for attempt in range(attempts):
            rng = np.random.default_rng(np.random.SeedSequence([seed, k, attempt]))
            try:
                aug = augment_sample(sample.replace(lineage=[]), plan.pipeline, pe.extra, rng)
                break
            except PlacementError:
                continue
        else:
            raise PlacementError(f"could not augment {src_entry.image} after {attempts} attempts")
        n = per_source.get(pe.source, 0)
        per_source[pe.source] = n + 1
        stem = f"{src_entry.stem}__aug{n}"
        img_rel, ann_rel = f"images/{stem}.png", f"labels/{stem}.txt"
        try:
            aug.image.save_png(out_dir / img_rel)
            write_annotations(out_dir / ann_rel, aug.boxes)
        except OSError as exc:
            raise DataError(f"cannot write {out_dir / img_rel}: {exc}") from exc
        meta = {
            "source": src_entry.image,
            "seed": [seed, k, attempt],
            "ops": aug.source_meta.get("lineage", []),
            "extra": {str(c): v for c, v in pe.extra.items()},
        }
        new_entries.append(ManifestEntry(img_rel, ann_rel, "train", src_entry.resolution, meta))
    out = DatasetManifest(
        entries=base.entries + new_entries,
        categories=list(manifest.categories),
        root=out_dir,
        seed=manifest.seed,
        synth_spec=manifest.synth_spec,
        augmented=True,
        source=manifest.source,
        config_hash=manifest.config_hash,
        lineage=[{"plan_targets": plan.targets, "seed": seed,
                  "pipeline": [asdict(op) for op in plan.pipeline]}],
    )
    totals = out.category_counts("train")
    if totals != plan.targets:
        raise DataError(f"augmented totals {totals} differ from plan targets {plan.targets}")
    out.save(out_dir / "manifest.json")
    return out
