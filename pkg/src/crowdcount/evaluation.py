"""Count extraction, MAE/MSE scoring and k-fold splitting.

Counts come from integrating (summing) the predicted density map with
negatives clamped to zero, since the reconstruction layer has no output
activation. Note the reported "MSE" is a root-mean-square error, i.e.
sqrt(mean(squared count error)) -- the conventional name in the crowd
counting literature despite the missing "R". MAE <= MSE always holds
(power-mean inequality).
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .density import DensityMap, PointSet
from .model import Model
from .tensor import Tensor4

__all__ = [
    "MetricsReport",
    "count_from_map",
    "metrics",
    "kfold",
    "evaluate",
]


@dataclass
class MetricsReport:
    per_image: list[tuple[str, float, float]]  # (id, true, estimated)
    mae: float
    mse: float
    n: int
    skipped: list[str] = field(default_factory=list)
    cropped: list[tuple[str, int]] = field(default_factory=list)  # (id, points dropped)

    def to_dict(self) -> dict:
        doc = {
            "n": self.n,
            "mae": self.mae,
            "mse": self.mse,
            "per_image": [{"id": i, "true": t, "estimated": e} for i, t, e in self.per_image],
            "skipped": list(self.skipped),
        }
        if self.cropped:
            doc["cropped"] = [{"id": i, "points_dropped": d} for i, d in self.cropped]
        return doc

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def count_from_map(dmap: DensityMap | np.ndarray) -> float:
    """Integrate the map with negative entries clamped to zero."""
    grid = dmap.grid if isinstance(dmap, DensityMap) else np.asarray(dmap)
    return float(np.maximum(grid, 0.0).sum())


def metrics(pairs: Sequence[tuple[float, float]],
            ids: Sequence[str] | None = None) -> MetricsReport:
    """MAE and root-mean-square count error over (true, estimated) pairs."""
    if len(pairs) < 1:
        raise ValueError("metrics: need at least one (true, estimated) pair")
    if ids is None:
        ids = [str(i) for i in range(len(pairs))]
    elif len(ids) != len(pairs):
        raise ValueError(f"metrics: {len(ids)} ids for {len(pairs)} pairs")
    z = np.array([p[0] for p in pairs], dtype=np.float64)
    zhat = np.array([p[1] for p in pairs], dtype=np.float64)
    err = z - zhat
    mae = float(np.abs(err).mean())
    mse = float(np.sqrt((err ** 2).mean()))
    per_image = [(str(i), float(t), float(e)) for i, t, e in zip(ids, z, zhat)]
    return MetricsReport(per_image=per_image, mae=mae, mse=mse, n=len(pairs))


def kfold(ids: Sequence[str], k: int, fold_index: int, seed: int) -> tuple[list[str], list[str]]:
    """Seeded shuffle then contiguous partition; returns (train, test) ids.

    Folds are disjoint, cover all ids, and differ in size by at most 1.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if not 0 <= fold_index < k:
        raise ValueError(f"fold_index must be in [0,{k}), got {fold_index}")
    if k > len(ids):
        raise ValueError(f"k={k} exceeds dataset size {len(ids)}")
    order = list(ids)
    np.random.default_rng(seed).shuffle(order)
    bounds = np.linspace(0, len(order), k + 1).round().astype(int)
    test = order[bounds[fold_index]:bounds[fold_index + 1]]
    train = order[:bounds[fold_index]] + order[bounds[fold_index + 1]:]
    return train, test


def _crop_to_multiple(image: Tensor4, points, multiple: int = 4):
    """Right/bottom-crop to dims divisible by `multiple`; drop points outside."""
    _, _, h, w = image.shape
    nh, nw = h - h % multiple, w - w % multiple
    if nh == h and nw == w:
        return image, points, 0
    patch = Tensor4(image.data[:, :, :nh, :nw].copy())
    pts = points.points
    keep = (pts[:, 0] < nw) & (pts[:, 1] < nh)
    dropped = int((~keep).sum())
    return patch, PointSet(pts[keep], (nw, nh)), dropped


def evaluate(model: Model, dataset: Sequence, skipped: Sequence[str] = (),
             workers: int = 1) -> MetricsReport:
    """Per-image inference in eval mode; the report keeps the dataset's order.

    Images whose dims are not divisible by 4 are right/bottom-cropped and
    the annotation points that fall outside are dropped and recorded.
    """
    cropped: list[tuple[str, int]] = []
    prepared = []
    for entry in dataset:
        img, pts, dropped = _crop_to_multiple(entry.image, entry.points)
        if dropped:
            cropped.append((entry.image_id, dropped))
        prepared.append((entry.image_id, img, pts))

    def infer(item):
        image_id, img, pts = item
        out = model.forward(img, mode="eval")
        return image_id, float(pts.count), count_from_map(out.data[0, 0])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as tp:
            results = list(tp.map(infer, prepared))
    else:
        results = [infer(item) for item in prepared]

    report = metrics([(t, e) for _, t, e in results], ids=[i for i, _, _ in results])
    report.skipped = list(skipped)
    report.cropped = cropped
    return report
