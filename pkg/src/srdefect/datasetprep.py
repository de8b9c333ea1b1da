"""HR/LR resolution-pair datasets built from bilinear downscaling chains."""

from __future__ import annotations

import json
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import BBox, DataError, GrayImage, read_annotations
from .manifest import DatasetManifest, ManifestEntry, dumps

PAIR_FORMAT = "srdefect-pairs/1"


def downsample_bilinear(img: GrayImage, factor: int) -> GrayImage:
    """Bilinear reduction with half-pixel-centre alignment.

    At factor 2 each output pixel is the mean of one 2x2 block; larger
    power-of-two factors cascade that step, so ``x4`` equals ``x2`` twice.
    """
    if factor < 2 or factor & (factor - 1):
        raise ValueError(f"factor must be a power of two >= 2, got {factor}")
    h, w = img.shape
    if h % factor or w % factor:
        raise ValueError(f"image sides {img.shape} not divisible by {factor}")
    px = img.pixels.astype(np.float64)
    while factor > 1:
        px = 0.25 * (px[0::2, 0::2] + px[1::2, 0::2] + px[0::2, 1::2] + px[1::2, 1::2])
        factor //= 2
    return GrayImage.from_array(px)


def upsample_bilinear(img: GrayImage, factor: int = 2) -> GrayImage:
    """Plain bilinear enlargement (half-pixel centres, edge clamp)."""
    px = img.pixels.astype(np.float64)

    def axis_weights(n):
        src = (np.arange(n * factor) + 0.5) / factor - 0.5
        i0 = np.clip(np.floor(src).astype(int), 0, n - 1)
        i1 = np.clip(i0 + 1, 0, n - 1)
        t = np.clip(src - np.floor(src), 0, 1)
        t = np.where(src < 0, 0.0, t)
        t = np.where(src > n - 1, 0.0, t)
        return i0, i1, t

    r0, r1, tr = axis_weights(px.shape[0])
    c0, c1, tc = axis_weights(px.shape[1])
    rows = px[r0] * (1 - tr)[:, None] + px[r1] * tr[:, None]
    out = rows[:, c0] * (1 - tc)[None, :] + rows[:, c1] * tc[None, :]
    return GrayImage.from_array(out)


@dataclass
class ResolutionPair:
    lr: GrayImage
    hr: GrayImage
    boxes: list[BBox]
    scale: int = 2

    def __post_init__(self):
        if self.hr.height != self.scale * self.lr.height or self.hr.width != self.scale * self.lr.width:
            raise DataError(f"HR {self.hr.shape} is not {self.scale}x LR {self.lr.shape}")


@dataclass
class PairEntry:
    lr: str
    hr: str
    annotation: str
    scale: int
    hr_res: int
    lr_res: int
    split: str
    source: str


@dataclass
class PairManifest:
    entries: list[PairEntry]
    chain: list[int]
    categories: list[str]
    source_manifest: str | None = None
    root: Path = field(default=Path("."))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def stages(self) -> list[tuple[int, int]]:
        return sorted({(e.hr_res, e.lr_res) for e in self.entries}, reverse=True)

    def filter(self, split: str | None = None, stage: tuple[int, int] | None = None) -> "PairManifest":
        keep = [
            e for e in self.entries
            if (split is None or e.split == split) and (stage is None or (e.hr_res, e.lr_res) == tuple(stage))
        ]
        return PairManifest(keep, self.chain, self.categories, self.source_manifest, self.root)

    def load_pair(self, i: int) -> ResolutionPair:
        e = self.entries[i]
        pair = ResolutionPair(
            GrayImage.load_png(self.root / e.lr),
            GrayImage.load_png(self.root / e.hr),
            read_annotations(self.root / e.annotation),
            e.scale,
        )
        if pair.lr.height != e.lr_res:
            raise DataError(f"{self.root / e.lr}: expected side {e.lr_res}")
        return pair

    def stage_manifest(self, resolution: int, which: str = "lr") -> DatasetManifest:
        """Detection manifest over one chain stage (LR or HR side of its pairs)."""
        key_res = "lr_res" if which == "lr" else "hr_res"
        entries = [
            ManifestEntry(getattr(e, which), e.annotation, e.split, resolution, {"source": e.source})
            for e in self.entries
            if getattr(e, key_res) == resolution
        ]
        if not entries:
            raise DataError(f"no pair stage with {which} side {resolution}")
        return DatasetManifest(entries=entries, categories=list(self.categories), root=self.root,
                               source=self.source_manifest)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        doc = {
            "format": PAIR_FORMAT,
            "chain": self.chain,
            "categories": self.categories,
            "source_manifest": self.source_manifest,
            "entries": [asdict(e) for e in self.entries],
        }
        try:
            path.write_text(dumps(doc))
        except OSError as exc:
            raise DataError(f"cannot write pair manifest {path}: {exc}") from exc
        self.root = path.parent
        return path

    @classmethod
    def load(cls, path: str | Path) -> "PairManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read pair manifest {path}: {exc}") from exc
        if doc.get("format") != PAIR_FORMAT:
            raise DataError(f"{path}: not a pair manifest")
        return cls([PairEntry(**e) for e in doc["entries"]], doc["chain"], doc["categories"],
                   doc.get("source_manifest"), path.parent)


def _check_chain(chain: list[int]) -> None:
    for hi, lo in zip(chain, chain[1:]):
        if hi != 2 * lo:
            raise ValueError(f"chain must halve at every step, got {chain}")


def make_pairs(manifest: DatasetManifest, chain: list[int], out_dir: str | Path) -> PairManifest:
    """Downsample every sample along ``chain`` and index adjacent (HR, LR) pairs.

    Files land in ``pairs/x2/{hr,lr}/<stem>_r<side>.png``; annotations are
    shared across stages.
    """
    chain = [int(c) for c in chain]
    _check_chain(chain)
    if manifest.augmented:
        raise ValueError("make_pairs expects an unaugmented manifest (downsample before augmenting)")
    out_dir = Path(out_dir)
    base = out_dir / "pairs" / "x2"
    for sub in ("hr", "lr", "labels"):
        (base / sub).mkdir(parents=True, exist_ok=True)
    entries: list[PairEntry] = []
    for i, e in enumerate(manifest.entries):
        if e.resolution != chain[0]:
            raise DataError(f"{e.image}: resolution {e.resolution} does not match chain head {chain[0]}")
        if len(chain) < 2:
            continue
        img = GrayImage.load_png(manifest.path_of(e.image))
        if img.height != chain[0]:
            raise DataError(f"{e.image}: actual side {img.height} does not match chain head {chain[0]}")
        ann_rel = f"pairs/x2/labels/{e.stem}.txt"
        shutil.copyfile(manifest.path_of(e.annotation), out_dir / ann_rel)
        levels = {chain[0]: img}
        for hi, lo in zip(chain, chain[1:]):
            levels[lo] = downsample_bilinear(levels[hi], 2)
        for hi, lo in zip(chain, chain[1:]):
            hr_rel = f"pairs/x2/hr/{e.stem}_r{hi}.png"
            lr_rel = f"pairs/x2/lr/{e.stem}_r{lo}.png"
            levels[hi].save_png(out_dir / hr_rel)
            levels[lo].save_png(out_dir / lr_rel)
            entries.append(PairEntry(lr_rel, hr_rel, ann_rel, 2, hi, lo, e.split, e.image))
    src = str(manifest.root / "manifest.json")
    pm = PairManifest(entries, chain, list(manifest.categories), src, out_dir)
    pm.save(out_dir / "pairs.json")
    return pm
