"""Ground-truth density maps from head annotations.

Each annotated head is splatted as a Gaussian whose mass is renormalized to
exactly 1 after truncation at the window and image borders, so the map sum
equals the head count and counting reduces to integration. Kernels are
either fixed (one window/sigma for the whole image) or adaptive, where
sigma_i is ``beta`` times the mean distance from head i to its k nearest
neighbors, a proxy for perspective-driven head size.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "PointSet",
    "DensityMap",
    "KernelSpec",
    "knn_mean_distance",
    "fixed_density",
    "adaptive_density",
    "generate_density",
    "downsample_sum",
    "write_annotation",
    "read_annotation",
]

# Floor on adaptive sigma; below ~1 px the splat degenerates toward a delta
# spike and the map stops being a useful regression target.
SIGMA_FLOOR = 1.0


@dataclass
class PointSet:
    """Head centers (x, y) in pixels for one image of size (width, height)."""

    points: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        w, h = self.image_size
        if pts.size and (pts[:, 0].min() < 0 or pts[:, 0].max() >= w
                         or pts[:, 1].min() < 0 or pts[:, 1].max() >= h):
            raise ValueError(f"points outside [0,{w}) x [0,{h})")
        self.points = pts

    @property
    def count(self) -> int:
        return self.points.shape[0]

    def translated(self, dx: float, dy: float) -> "PointSet":
        return PointSet(self.points + np.array([dx, dy]), self.image_size)


@dataclass
class DensityMap:
    """Nonnegative (height, width) grid; ``scale`` is the downsample factor
    relative to the source image."""

    grid: np.ndarray
    scale: int = 1

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.float64)
        if self.grid.ndim != 2:
            raise ValueError(f"grid must be 2-D, got shape {self.grid.shape}")

    def total(self) -> float:
        return float(self.grid.sum())


@dataclass(frozen=True)
class KernelSpec:
    """Splat kernel configuration; ``mode`` picks fixed or adaptive sigmas."""

    mode: str = "fixed"
    fixed_window: int = 25
    fixed_sigma: float = 1.5
    beta: float = 0.3
    k_neighbors: int = 3

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive"):
            raise ValueError(f"mode must be 'fixed' or 'adaptive', got {self.mode!r}")
        if self.fixed_window % 2 == 0 or self.fixed_window < 1:
            raise ValueError(f"fixed_window must be odd and >= 1, got {self.fixed_window}")
        if self.fixed_sigma <= 0 or self.beta <= 0:
            raise ValueError("fixed_sigma and beta must be > 0")
        if self.k_neighbors < 1:
            raise ValueError(f"k_neighbors must be >= 1, got {self.k_neighbors}")


def knn_mean_distance(points: PointSet, k: int) -> np.ndarray:
    """Mean Euclidean distance from each point to its min(k, N-1) nearest others."""
    n = points.count
    if n <= 1:
        raise ValueError("knn_mean_distance needs at least 2 points")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    pts = points.points
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=-1))
    np.fill_diagonal(dist, np.inf)
    dist.sort(axis=1)
    kk = min(k, n - 1)
    return dist[:, :kk].mean(axis=1)


def _splat(grid: np.ndarray, x: float, y: float, window: int, sigma: float) -> None:
    """Add a unit-mass truncated Gaussian centered at the rounded pixel."""
    h, w = grid.shape
    cx = min(max(int(math.floor(x + 0.5)), 0), w - 1)
    cy = min(max(int(math.floor(y + 0.5)), 0), h - 1)
    half = (window - 1) // 2

    x0, x1 = max(cx - half, 0), min(cx + half, w - 1)
    y0, y1 = max(cy - half, 0), min(cy + half, h - 1)
    dx = np.arange(x0, x1 + 1, dtype=np.float64) - cx
    dy = np.arange(y0, y1 + 1, dtype=np.float64) - cy
    kern = np.exp(-(dy[:, None] ** 2 + dx[None, :] ** 2) / (2.0 * sigma * sigma))
    kern /= kern.sum()  # center cell is always in bounds, so the sum is > 0
    grid[y0:y1 + 1, x0:x1 + 1] += kern


def fixed_density(points: PointSet, spec: KernelSpec) -> DensityMap:
    """One Gaussian of spec.fixed_sigma in a spec.fixed_window box per head."""
    w, h = points.image_size
    grid = np.zeros((h, w), dtype=np.float64)
    for x, y in points.points:
        _splat(grid, x, y, spec.fixed_window, spec.fixed_sigma)
    return DensityMap(grid, scale=1)


def adaptive_density(points: PointSet, spec: KernelSpec) -> DensityMap:
    """Per-head sigma_i = beta * mean distance to the k nearest neighbors.

    Sigmas are floored at 1 px and each window is 2*ceil(3*sigma)+1 so the
    kernel is truncated at 3 sigma. Point sets with fewer than 2 heads fall
    back to the fixed kernel (there are no neighbor distances to adapt to).
    """
    if points.count <= 1:
        return fixed_density(points, spec)
    w, h = points.image_size
    grid = np.zeros((h, w), dtype=np.float64)
    dbar = knn_mean_distance(points, spec.k_neighbors)
    for (x, y), d in zip(points.points, dbar):
        sigma = max(spec.beta * d, SIGMA_FLOOR)
        window = 2 * math.ceil(3.0 * sigma) + 1
        _splat(grid, x, y, window, sigma)
    return DensityMap(grid, scale=1)


def generate_density(points: PointSet, spec: KernelSpec) -> DensityMap:
    if spec.mode == "fixed":
        return fixed_density(points, spec)
    return adaptive_density(points, spec)


def downsample_sum(dmap: DensityMap, factor: int) -> DensityMap:
    """Sum factor x factor blocks; the total is preserved exactly."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    h, w = dmap.grid.shape
    if h % factor or w % factor:
        raise ValueError(f"grid {h}x{w} not divisible by factor {factor}; crop first")
    if factor == 1:
        return DensityMap(dmap.grid.copy(), scale=dmap.scale)
    g = dmap.grid.reshape(h // factor, factor, w // factor, factor).sum(axis=(1, 3))
    return DensityMap(g, scale=dmap.scale * factor)


# ---------------------------------------------------------------------------
# Annotation files: {"image": name, "width": W, "height": H, "points": [[x,y],...]}
# ---------------------------------------------------------------------------

def write_annotation(path: str | Path, image_name: str, points: PointSet) -> None:
    w, h = points.image_size
    doc = {
        "image": image_name,
        "width": int(w),
        "height": int(h),
        "points": [[float(x), float(y)] for x, y in points.points],
    }
    Path(path).write_text(json.dumps(doc))


def read_annotation(path: str | Path) -> tuple[str, PointSet, int]:
    """Parse an annotation file; returns (image name, points, #clamped).

    Out-of-bounds points are clamped inward rather than dropped so the head
    count is preserved; the caller decides whether to warn.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: malformed annotation JSON at line {e.lineno}: {e.msg}") from e
    for key in ("image", "width", "height", "points"):
        if key not in doc:
            raise ValueError(f"{path}: annotation missing key {key!r}")
    w, h = int(doc["width"]), int(doc["height"])
    if w < 1 or h < 1:
        raise ValueError(f"{path}: invalid image size {w}x{h}")
    pts = np.asarray(doc["points"], dtype=np.float64).reshape(-1, 2)
    clamped = int(np.sum((pts[:, 0] < 0) | (pts[:, 0] >= w)
                         | (pts[:, 1] < 0) | (pts[:, 1] >= h)))
    if clamped:
        pts[:, 0] = np.clip(pts[:, 0], 0.0, w - 0.5)
        pts[:, 1] = np.clip(pts[:, 1], 0.0, h - 0.5)
    return str(doc["image"]), PointSet(pts, (w, h)), clamped
