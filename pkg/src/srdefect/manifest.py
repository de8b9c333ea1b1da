"""JSON dataset manifests: declarative indexes of annotated images."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .core import DataError, GrayImage, Sample, read_annotations

MANIFEST_FORMAT = "srdefect-manifest/1"
SPLITS = ("train", "val", "test")


def dumps(obj) -> str:
    """Canonical JSON used for every artifact written by the package."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ManifestEntry:
    image: str
    annotation: str
    split: str
    resolution: int
    meta: dict = field(default_factory=dict)

    @property
    def stem(self) -> str:
        return Path(self.image).stem


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    categories: list[str]
    root: Path = Path(".")
    seed: int | None = None
    synth_spec: dict | None = None
    augmented: bool = False
    source: str | None = None
    config_hash: str | None = None
    lineage: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def resolutions(self) -> set[int]:
        return {e.resolution for e in self.entries}

    def split(self, name: str) -> "DatasetManifest":
        sub = DatasetManifest(**{**self._fields(), "entries": [e for e in self.entries if e.split == name]})
        return sub

    def _fields(self) -> dict:
        return dict(
            entries=self.entries, categories=self.categories, root=self.root, seed=self.seed,
            synth_spec=self.synth_spec, augmented=self.augmented, source=self.source,
            config_hash=self.config_hash, lineage=self.lineage,
        )

    def path_of(self, rel: str) -> Path:
        return self.root / rel

    def load_sample(self, i: int) -> Sample:
        e = self.entries[i]
        img = GrayImage.load_png(self.path_of(e.image))
        boxes = read_annotations(self.path_of(e.annotation))
        if img.height != e.resolution or img.width != e.resolution:
            raise DataError(f"{self.path_of(e.image)}: expected side {e.resolution}, got {img.shape}")
        return Sample(img, boxes, dict(e.meta))

    def category_counts(self, split: str | None = "train") -> dict[str, int]:
        counts = dict.fromkeys(self.categories, 0)
        for e in self.entries:
            if split is not None and e.split != split:
                continue
            for b in read_annotations(self.path_of(e.annotation)):
                counts[self.categories[b.category]] += 1
        return counts

    def to_dict(self) -> dict:
        return {
            "format": MANIFEST_FORMAT,
            "categories": list(self.categories),
            "seed": self.seed,
            "synth_spec": self.synth_spec,
            "augmented": self.augmented,
            "source": self.source,
            "config_hash": self.config_hash,
            "lineage": self.lineage,
            "entries": [asdict(e) for e in self.entries],
        }

    def save(self, path: str | Path) -> Path:
        """Write to ``path`` and adopt its directory as root (entry paths are kept as given)."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        try:
            path.write_text(dumps(self.to_dict()))
        except OSError as exc:
            raise DataError(f"cannot write manifest {path}: {exc}") from exc
        self.root = path.parent
        return path

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        if data.get("format") != MANIFEST_FORMAT:
            raise DataError(f"{path}: not a dataset manifest (format={data.get('format')!r})")
        return cls(
            entries=[ManifestEntry(**e) for e in data["entries"]],
            categories=list(data["categories"]),
            root=path.parent,
            seed=data.get("seed"),
            synth_spec=data.get("synth_spec"),
            augmented=data.get("augmented", False),
            source=data.get("source"),
            config_hash=data.get("config_hash"),
            lineage=data.get("lineage", []),
        )

    def rebased(self, new_root: str | Path) -> "DatasetManifest":
        """Copy whose entry paths are relative to ``new_root``."""
        new_root = Path(new_root)

        def rel(p: str) -> str:
            return Path(os.path.relpath(self.root / p, new_root)).as_posix()

        entries = [
            ManifestEntry(rel(e.image), rel(e.annotation), e.split, e.resolution, dict(e.meta))
            for e in self.entries
        ]
        return DatasetManifest(**{**self._fields(), "entries": entries, "root": new_root})
