"""Synthetic line-space SEM imagery with injected defects.

Vertical lines are rasterised with exact per-pixel area coverage, so a
noiseless pattern with integer edges is exactly two-level.  Defects are
parametric pixel edits applied before noise.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .core import ADI_CATEGORIES, BBox, DataError, GrayImage, Sample, iou, write_annotations
from .manifest import SPLITS, DatasetManifest, ManifestEntry

log = logging.getLogger(__name__)

PLACEMENT_RETRIES = 50
MAX_OVERLAP_IOU = 0.1
_EDGE_RHO = 0.8

# morphology used to render each category name
MORPHOLOGY = {
    "bridge": "bridge",
    "micro_bridge": "micro_bridge",
    "gap": "gap",
    "break": "gap",
    "probable_gap": "probable_gap",
    "line_collapse": "line_collapse",
    "pattern_collapse": "line_collapse",
    "dark_spot": "dark_spot",
}


class PlacementError(RuntimeError):
    """No valid, non-overlapping placement found within the retry budget."""


@dataclass(frozen=True)
class NoiseModel:
    kind: str = "gaussian"
    sigma: float = 0.04
    shape: float = 2.0
    scale: float = 0.02

    def __post_init__(self):
        if self.kind == "gaussian":
            if not self.sigma >= 0:
                raise ValueError(f"gaussian sigma must be >= 0, got {self.sigma}")
        elif self.kind == "gamma":
            if not (self.shape > 0 and self.scale > 0):
                raise ValueError(f"gamma shape and scale must be > 0, got {self.shape}, {self.scale}")
        elif self.kind != "none":
            raise ValueError(f"unknown noise model {self.kind!r}")


@dataclass(frozen=True)
class DefectSizes:
    """Defect extents along the line direction, in units of CD."""

    bridge: tuple[float, float] = (0.8, 1.6)
    micro_bridge: tuple[float, float] = (0.25, 0.5)
    micro_bridge_level: tuple[float, float] = (0.5, 0.8)
    gap: tuple[float, float] = (0.6, 1.5)
    probable_gap: tuple[float, float] = (0.6, 1.5)
    probable_gap_level: tuple[float, float] = (0.35, 0.65)
    line_collapse: tuple[float, float] = (8.0, 12.0)
    dark_spot_radius: tuple[float, float] = (0.3, 0.7)
    dark_spot_depth: tuple[float, float] = (0.4, 0.7)
    margin_px: float = 1.0


@dataclass(frozen=True)
class SynthSpec:
    resolution: int = 256
    pitch_px: int = 16
    cd_px: int = 8
    line_polarity: str = "bright_lines"
    edge_roughness_sigma: float = 0.5
    noise: NoiseModel = field(default_factory=NoiseModel)
    base_line_level: float = 0.7
    base_space_level: float = 0.3
    categories: tuple[str, ...] = ADI_CATEGORIES
    defect_mix: dict | None = None
    defects_per_image: tuple[int, int] = (1, 3)
    sizes: DefectSizes = field(default_factory=DefectSizes)
    seed: int = 0
    process_tag: str = "nominal"

    def __post_init__(self):
        if self.defect_mix is None:
            object.__setattr__(self, "defect_mix", {c: 1.0 / len(self.categories) for c in self.categories})
        self.validate()

    def validate(self) -> None:
        if not 0 < self.cd_px < self.pitch_px < self.resolution / 4:
            raise ValueError(
                f"need 0 < cd_px < pitch_px < resolution/4, got cd={self.cd_px} "
                f"pitch={self.pitch_px} resolution={self.resolution}"
            )
        if not 0 <= self.edge_roughness_sigma < self.cd_px / 2:
            raise ValueError("edge_roughness_sigma must lie in [0, cd_px/2)")
        for lvl in (self.base_line_level, self.base_space_level):
            if not 0 <= lvl <= 1:
                raise ValueError("intensity levels must lie in [0, 1]")
        if self.line_polarity == "bright_lines":
            ok = self.base_line_level > self.base_space_level
        elif self.line_polarity == "dark_lines":
            ok = self.base_line_level < self.base_space_level
        else:
            raise ValueError(f"unknown line_polarity {self.line_polarity!r}")
        if not ok:
            raise ValueError(f"levels inconsistent with {self.line_polarity}")
        unknown = set(self.defect_mix) - set(self.categories)
        if unknown:
            raise ValueError(f"defect_mix names unknown categories {sorted(unknown)}")
        for name in self.categories:
            if name not in MORPHOLOGY:
                raise ValueError(f"no rendering rule for category {name!r}")
        probs = np.array(list(self.defect_mix.values()), dtype=float)
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-6:
            raise ValueError("defect_mix probabilities must be >= 0 and sum to 1")
        lo, hi = self.defects_per_image
        if not 0 <= lo <= hi:
            raise ValueError("defects_per_image must satisfy 0 <= min <= max")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["categories"] = list(self.categories)
        d["defects_per_image"] = list(self.defects_per_image)
        d["sizes"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["sizes"].items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        if "noise" in d and isinstance(d["noise"], dict):
            d["noise"] = NoiseModel(**d["noise"])
        if "sizes" in d and isinstance(d["sizes"], dict):
            d["sizes"] = DefectSizes(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["sizes"].items()})
        for key in ("categories", "defects_per_image"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class ProcessCondition:
    """Relative geometry/contrast shift of a base spec (e.g. a new process)."""

    name: str
    pitch_scale: float = 1.0
    cd_scale: float = 1.0
    contrast_scale: float = 1.0
    seed_offset: int = 1_000_003

    def apply(self, spec: SynthSpec) -> SynthSpec:
        mid = (spec.base_line_level + spec.base_space_level) / 2
        return replace(
            spec,
            pitch_px=int(round(spec.pitch_px * self.pitch_scale)),
            cd_px=int(round(spec.cd_px * self.cd_scale)),
            base_line_level=mid + self.contrast_scale * (spec.base_line_level - mid),
            base_space_level=mid + self.contrast_scale * (spec.base_space_level - mid),
            seed=spec.seed + self.seed_offset,
            process_tag=self.name,
        )


@dataclass
class PatternLayout:
    """Per-row line edge positions of one rendered pattern."""

    left: np.ndarray  # (rows, lines) left edges, float pixels
    right: np.ndarray
    line_level: float
    space_level: float
    pitch: int
    cd: int
    size: int

    def coverage(self, rows: slice, cols: slice, left=None, right=None) -> np.ndarray:
        """Area fraction of each pixel covered by the lines in the region."""
        left = self.left[rows] if left is None else left
        right = self.right[rows] if right is None else right
        return _coverage(left, right, cols)

    def render(self) -> GrayImage:
        cov = self.coverage(slice(0, self.size), slice(0, self.size))
        return GrayImage.from_array(self.space_level + (self.line_level - self.space_level) * cov)

    def interior_lines(self, need_right_neighbor: bool = False) -> np.ndarray:
        """Indices of lines lying fully inside the image (with their neighbor)."""
        lo = self.left.min(axis=0)
        hi = (self.right[:, 1:].max(axis=0) if need_right_neighbor else self.right.max(axis=0))
        n = hi.shape[0]
        ok = (lo[:n] >= 2) & (hi <= self.size - 2)
        return np.flatnonzero(ok)


def _coverage(left: np.ndarray, right: np.ndarray, cols: slice) -> np.ndarray:
    x = np.arange(cols.start, cols.stop, dtype=np.float64)
    ov = np.minimum(right[:, :, None], x[None, None, :] + 1) - np.maximum(left[:, :, None], x[None, None, :])
    return np.clip(np.clip(ov, 0.0, 1.0).sum(axis=1), 0.0, 1.0)


def _edge_walk(rng: np.random.Generator, rows: int, n: int, sigma: float, bound: float) -> np.ndarray:
    if sigma == 0:
        return np.zeros((rows, n))
    burn = 50
    xi = rng.standard_normal((rows + burn, n))
    walk = lfilter([math.sqrt(1 - _EDGE_RHO**2) * sigma], [1.0, -_EDGE_RHO], xi, axis=0)[burn:]
    return np.clip(walk, -bound, bound)


def make_layout(spec: SynthSpec, rng: np.random.Generator) -> PatternLayout:
    n = spec.resolution
    offset = int(rng.integers(0, spec.pitch_px))
    k = np.arange(-1, n // spec.pitch_px + 2)
    nominal = offset + k * spec.pitch_px
    bound = min(3 * spec.edge_roughness_sigma, 0.45 * spec.cd_px)
    el = _edge_walk(rng, n, len(k), spec.edge_roughness_sigma, bound)
    er = _edge_walk(rng, n, len(k), spec.edge_roughness_sigma, bound)
    return PatternLayout(
        left=nominal[None, :] + el,
        right=nominal[None, :] + spec.cd_px + er,
        line_level=spec.base_line_level,
        space_level=spec.base_space_level,
        pitch=spec.pitch_px,
        cd=spec.cd_px,
        size=n,
    )


def render_pattern(spec: SynthSpec, rng: np.random.Generator | None = None) -> GrayImage:
    """Noiseless vertical line-space raster; deterministic for ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    return make_layout(spec, rng).render()


def _uniform(rng, lo_hi) -> float:
    lo, hi = lo_hi
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def _extent(rng, lo_hi, cd: int, size: int) -> int:
    return int(np.clip(round(_uniform(rng, lo_hi) * cd), 1, size - 4))


def _propose(morph: str, layout: PatternLayout, sizes: DefectSizes, rng):
    """One candidate edit: (row slice, col slice, modified-region fn)."""
    n, cd, contrast = layout.size, layout.cd, layout.line_level - layout.space_level
    m = sizes.margin_px

    if morph == "dark_spot":
        r = max(1.0, _uniform(rng, sizes.dark_spot_radius) * cd)
        cy, cx = rng.uniform(r + 2, n - r - 2, size=2)
        depth = _uniform(rng, sizes.dark_spot_depth)
        rows = slice(max(0, int(cy - r - m)), min(n, int(math.ceil(cy + r + m)) + 1))
        cols = slice(max(0, int(cx - r - m)), min(n, int(math.ceil(cx + r + m)) + 1))

        def edit(region, rows=rows, cols=cols):
            yy, xx = np.mgrid[rows, cols]
            d = np.hypot(yy + 0.5 - cy, xx + 0.5 - cx)
            w = np.clip(r + 0.5 - d, 0.0, 1.0)
            return region * (1 - depth * w)

        return rows, cols, edit, (cols.start, rows.start, cols.stop, rows.stop)

    need_nb = morph in ("bridge", "micro_bridge", "line_collapse")
    lines = layout.interior_lines(need_right_neighbor=need_nb)
    if lines.size == 0:
        raise PlacementError("no interior line available")
    k = int(rng.choice(lines))
    length = _extent(rng, getattr(sizes, morph), cd, n)
    if morph == "line_collapse" and length < 8 * cd:
        raise PlacementError(f"image too small for a line collapse of {8 * cd} rows")
    r0 = int(rng.integers(1, n - length - 1))
    rows = slice(r0, r0 + length)
    L, R = layout.left[rows], layout.right[rows]

    if morph in ("bridge", "micro_bridge"):
        x0, x1 = R[:, k].min(), L[:, k + 1].max()
        level = 1.0 if morph == "bridge" else _uniform(rng, sizes.micro_bridge_level)
        cols = slice(int(math.floor(x0)), int(math.ceil(x1)))

        def edit(region):
            bl = np.concatenate([L, R[:, k : k + 1]], axis=1)
            br = np.concatenate([R, L[:, k + 1 : k + 2]], axis=1)
            base = _coverage(L, R, cols)
            filled = _coverage(bl, br, cols)
            return region + level * contrast * (filled - base)

    elif morph in ("gap", "probable_gap"):
        x0, x1 = L[:, k].min(), R[:, k].max()
        frac = 1.0 if morph == "gap" else _uniform(rng, sizes.probable_gap_level)
        cols = slice(int(math.floor(x0)), int(math.ceil(x1)))

        def edit(region):
            own = _coverage(L[:, k : k + 1], R[:, k : k + 1], cols)
            return region - frac * contrast * own

    elif morph == "line_collapse":
        space = layout.pitch - cd
        shift = _uniform(rng, (0.7, 1.0)) * space
        t = (np.arange(length) + 0.5) / length
        d = shift * np.sin(np.pi * t)
        x0, x1 = L[:, k].min(), R[:, k + 1].max()
        cols = slice(int(math.floor(x0)), int(math.ceil(x1)))

        def edit(region):
            base = _coverage(L, R, cols)
            L2, R2 = L.copy(), R.copy()
            L2[:, k] += d
            R2[:, k] += d
            return region + contrast * (_coverage(L2, R2, cols) - base)
    else:
        raise ValueError(f"unknown morphology {morph!r}")

    box = (x0 - m, r0 - m, x1 + m, r0 + length + m)
    return rows, cols, edit, box


def inject_defect(img: GrayImage, layout: PatternLayout, boxes_so_far: list[BBox],
                  category: int, name: str, rng: np.random.Generator,
                  sizes: DefectSizes | None = None) -> tuple[GrayImage, BBox]:
    """Paint one defect of category ``name`` (id ``category``) into ``img``.

    Pixel edits stay inside the returned box; the box overlaps no existing box
    with IoU above 0.1.
    """
    sizes = sizes or DefectSizes()
    morph = MORPHOLOGY[name]
    n = layout.size
    for _ in range(PLACEMENT_RETRIES):
        rows, cols, edit, (x0, y0, x1, y1) = _propose(morph, layout, sizes, rng)
        box = BBox.from_pixels(category, x0, y0, x1, y1, n, n)
        if any(iou(box, b) > MAX_OVERLAP_IOU for b in boxes_so_far):
            continue
        px = np.array(img.pixels, dtype=np.float64)
        px[rows, cols] = edit(px[rows, cols])
        return GrayImage.from_array(px), box
    raise PlacementError(f"no placement for {name} after {PLACEMENT_RETRIES} attempts")


def apply_noise(img: GrayImage, noise_model: NoiseModel, rng: np.random.Generator) -> GrayImage:
    """Add i.i.d. zero-mean noise and clip to ``[0, 1]``."""
    px = img.pixels.astype(np.float64)
    if noise_model.kind == "none" or (noise_model.kind == "gaussian" and noise_model.sigma == 0):
        return img
    if noise_model.kind == "gaussian":
        noise = rng.normal(0.0, noise_model.sigma, size=px.shape)
    else:
        noise = rng.gamma(noise_model.shape, noise_model.scale, size=px.shape)
        noise -= noise_model.shape * noise_model.scale
    return GrayImage.from_array(px + noise)


def image_seed(master_seed: int, split: str, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, SPLITS.index(split), index])


def generate_sample(spec: SynthSpec, split: str, index: int) -> Sample:
    ss = image_seed(spec.seed, split, index)
    rng = np.random.default_rng(ss)
    layout = make_layout(spec, rng)
    img = layout.render()
    names = list(spec.defect_mix)
    probs = np.array([spec.defect_mix[c] for c in names], dtype=float)
    probs /= probs.sum()
    lo, hi = spec.defects_per_image
    n_defects = max(1, int(rng.integers(lo, hi + 1))) if hi > 0 else 0
    boxes: list[BBox] = []
    for _ in range(n_defects):
        name = names[int(rng.choice(len(names), p=probs))]
        try:
            img, box = inject_defect(img, layout, boxes, spec.categories.index(name), name, rng, spec.sizes)
        except PlacementError:
            if boxes:
                continue
            raise
        boxes.append(box)
    img = apply_noise(img, spec.noise, rng)
    meta = {
        "seed": [spec.seed, SPLITS.index(split), index],
        "process": spec.process_tag,
        "resolution": spec.resolution,
        "lineage": [],
    }
    return Sample(img, boxes, meta)


def _write_one(args) -> ManifestEntry:
    spec, split, index, out_dir = args
    sample = generate_sample(spec, split, index)
    stem = f"{split}_{index:05d}"
    img_rel, ann_rel = f"images/{stem}.png", f"labels/{stem}.txt"
    try:
        sample.image.save_png(out_dir / img_rel)
        write_annotations(out_dir / ann_rel, sample.boxes)
    except OSError as exc:
        raise DataError(f"cannot write sample {out_dir / img_rel}: {exc}") from exc
    return ManifestEntry(img_rel, ann_rel, split, spec.resolution, sample.source_meta)


def generate_dataset(spec: SynthSpec, n_images: int, out_dir: str | Path, split: str = "train",
                     workers: int = 1, manifest_name: str = "manifest.json") -> DatasetManifest:
    """Write ``n_images`` annotated samples plus a manifest under ``out_dir``.

    Per-image seeds are derived from ``spec.seed`` by index, so output does not
    depend on ``workers``.
    """
    if split not in SPLITS:
        raise ValueError(f"split must be one of {SPLITS}")
    spec.validate()
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {out_dir}: {exc}") from exc
    jobs = [(spec, split, i, out_dir) for i in range(n_images)]
    if workers > 1 and n_images > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_write_one, jobs, chunksize=8))
    else:
        entries = [_write_one(j) for j in jobs]
    manifest = DatasetManifest(
        entries=entries,
        categories=list(spec.categories),
        seed=spec.seed,
        synth_spec=spec.to_dict(),
    )
    manifest.save(out_dir / manifest_name)
    log.info("wrote %d %s samples to %s", n_images, split, out_dir)
    return manifest


def generate_splits(spec: SynthSpec, counts: dict[str, int], out_dir: str | Path,
                    workers: int = 1) -> DatasetManifest:
    """Generate several splits into one directory and one combined manifest."""
    out_dir = Path(out_dir)
    entries: list[ManifestEntry] = []
    for split, n in counts.items():
        part = generate_dataset(spec, n, out_dir, split, workers, manifest_name=f".{split}.json")
        (out_dir / f".{split}.json").unlink()
        entries.extend(part.entries)
    manifest = DatasetManifest(entries=entries, categories=list(spec.categories), seed=spec.seed,
                               synth_spec=spec.to_dict())
    manifest.save(out_dir / "manifest.json")
    return manifest
