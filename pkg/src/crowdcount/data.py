"""Dataset ingestion and a synthetic generator for desk-scale runs.

Manifests are two-column CSVs (``image_path,annotation_path``) with paths
resolved against the manifest's directory. Images decode to (1, 3, h, w)
float32 in [0, 1]; grayscale inputs are replicated across the three
channels. ``.drt4`` image files are accepted alongside regular formats so
tests can inject raw grids without an encoder.

The synthetic generator draws dark discs ("heads") on a noisy light
background and writes images, per-image annotation JSONs and train/test
manifests; everything is a pure function of the seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .density import PointSet, read_annotation, write_annotation
from .tensor import Tensor4, read_tensor

__all__ = [
    "DatasetManifest",
    "DatasetEntry",
    "LoadedDataset",
    "SynthConfig",
    "read_image",
    "load_dataset",
    "synth_generate",
]

MANIFEST_HEADER = ["image_path", "annotation_path"]


@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, str]]  # (image_path, annotation_path), relative to root
    split: str = "all"

    @classmethod
    def read(cls, path: str | Path, split: str = "all") -> "DatasetManifest":
        path = Path(path)
        with open(path, newline="") as f:
            rows = [row for row in csv.reader(f) if row]
        if rows and rows[0] == MANIFEST_HEADER:
            rows = rows[1:]
        entries = []
        for row in rows:
            if len(row) != 2:
                raise ValueError(f"{path}: manifest rows need 2 columns, got {row!r}")
            entries.append((row[0], row[1]))
        return cls(root=path.parent, entries=entries, split=split)

    def write(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(MANIFEST_HEADER)
            writer.writerows(self.entries)

    def image_paths(self) -> list[Path]:
        return [self.root / img for img, _ in self.entries]

    def validate(self) -> None:
        seen = set()
        for img, ann in self.entries:
            if img in seen:
                raise ValueError(f"duplicate image id {img!r} in manifest")
            seen.add(img)
            for rel in (img, ann):
                p = self.root / rel
                if not p.exists():
                    raise FileNotFoundError(f"manifest references missing file {p}")


@dataclass
class DatasetEntry:
    image_id: str
    image: Tensor4  # (1, 3, h, w) float32 in [0, 1]
    points: PointSet


@dataclass
class LoadedDataset:
    entries: list[DatasetEntry]
    skipped: list[str] = field(default_factory=list)
    clamped_points: int = 0

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> DatasetEntry:
        return self.entries[i]

    def __iter__(self):
        return iter(self.entries)

    def ids(self) -> list[str]:
        return [e.image_id for e in self.entries]


def read_image(path: str | Path) -> Tensor4:
    """Decode to (1, 3, h, w) float32 in [0, 1]; grayscale is replicated."""
    path = Path(path)
    if path.suffix == ".drt4":
        t = read_tensor(path)
        n, c, h, w = t.shape
        if n != 1 or c not in (1, 3):
            raise ValueError(f"{path}: drt4 image must be (1,1|3,h,w), got {t.shape}")
        arr = np.clip(t.data, 0.0, 1.0)
    else:
        try:
            with Image.open(path) as img:
                if img.mode in ("RGB", "RGBA", "P", "CMYK"):
                    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
                    arr = arr.transpose(2, 0, 1)[None]
                else:
                    arr = np.asarray(img.convert("L"), dtype=np.float32) / 255.0
                    arr = arr[None, None]
        except (OSError, SyntaxError) as e:
            raise ValueError(f"cannot decode image {path}: {e}") from e
    if arr.shape[1] == 1:
        arr = np.repeat(arr, 3, axis=1)
    return Tensor4(np.ascontiguousarray(arr, dtype=np.float32))


def load_dataset(manifest: DatasetManifest, on_error: str = "raise") -> LoadedDataset:
    """Decode every manifest entry; on_error='skip' records failures instead
    of raising so evaluation can report them."""
    if on_error not in ("raise", "skip"):
        raise ValueError(f"on_error must be 'raise' or 'skip', got {on_error!r}")
    manifest.validate()
    out = LoadedDataset(entries=[])
    for img_rel, ann_rel in manifest.entries:
        try:
            image = read_image(manifest.root / img_rel)
            _, points, clamped = read_annotation(manifest.root / ann_rel)
        except ValueError as e:
            if on_error == "skip":
                out.skipped.append(img_rel)
                continue
            raise
        _, _, h, w = image.shape
        pw, ph = points.image_size
        if (pw, ph) != (w, h):
            raise ValueError(
                f"{ann_rel}: annotation size {pw}x{ph} != image size {w}x{h}")
        out.clamped_points += clamped
        out.entries.append(DatasetEntry(image_id=img_rel, image=image, points=points))
    return out


@dataclass
class SynthConfig:
    train_count: int = 8
    test_count: int = 4
    image_size: tuple[int, int] = (64, 64)  # (width, height)
    heads_min: int = 1
    heads_max: int = 20
    blob_radius: float = 2.5
    noise_level: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.heads_min <= self.heads_max <= 64:
            raise ValueError(f"head range {self.heads_min}..{self.heads_max} must lie in [0, 64]")
        if self.train_count < 0 or self.test_count < 0:
            raise ValueError("image counts must be >= 0")


BACKGROUND_VALUE = 0.85
DISC_VALUE = 0.15


def _synth_image(rng: np.random.Generator, cfg: SynthConfig) -> tuple[np.ndarray, PointSet]:
    """Dark discs on a light noisy background.

    Discs keep a margin from the border and a minimum pairwise separation
    (rejection sampling, capped attempts) so every head contributes the same
    dark stamp; that keeps head count cleanly recoverable from the image,
    which is the point of a verification dataset.
    """
    w, h = cfg.image_size
    r = cfg.blob_radius
    img = BACKGROUND_VALUE + cfg.noise_level * rng.standard_normal((h, w))
    n_heads = int(rng.integers(cfg.heads_min, cfg.heads_max + 1))
    margin = min(int(np.ceil(r)) + 1, w // 4, h // 4)
    min_sep_sq = (2.0 * r + 1.0) ** 2
    points: list[tuple[float, float]] = []
    for _ in range(n_heads):
        for attempt in range(200):
            x = float(rng.uniform(margin, w - margin))
            y = float(rng.uniform(margin, h - margin))
            if all((x - px) ** 2 + (y - py) ** 2 >= min_sep_sq for px, py in points):
                break
        points.append((x, y))  # after capped attempts, accept the last draw
    yy, xx = np.mgrid[0:h, 0:w]
    for x, y in points:
        img[(xx - x) ** 2 + (yy - y) ** 2 <= r ** 2] = DISC_VALUE
    img = np.clip(img, 0.0, 1.0)
    return img, PointSet(np.asarray(points, dtype=np.float64).reshape(-1, 2), (w, h))


def synth_generate(cfg: SynthConfig, out_dir: str | Path) -> tuple[Path, Path]:
    """Write images/, annotations/ and train/test manifests under out_dir.

    Returns the (train_manifest, test_manifest) paths. Byte-identical output
    for a fixed config and seed.
    """
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)

    rows = {"train": [], "test": []}
    for split, count in (("train", cfg.train_count), ("test", cfg.test_count)):
        for i in range(count):
            name = f"{split}_{i:03d}"
            img, points = _synth_image(rng, cfg)
            img_rel = f"images/{name}.png"
            ann_rel = f"annotations/{name}.json"
            pixels = np.round(img * 255.0).astype(np.uint8)
            Image.fromarray(pixels, mode="L").save(out / img_rel)
            write_annotation(out / ann_rel, img_rel, points)
            rows[split].append((img_rel, ann_rel))

    train_path, test_path = out / "train.csv", out / "test.csv"
    DatasetManifest(root=out, entries=rows["train"], split="train").write(train_path)
    DatasetManifest(root=out, entries=rows["test"], split="test").write(test_path)
    return train_path, test_path
