"""Euclidean-loss SGD training with momentum, weight decay and augmentation.

The loss over a batch of N samples is 1/(2N) * sum of squared map
differences, optimized with velocity-style momentum SGD: weight decay is
folded additively into the gradient, BN gamma/beta are exempt from decay.
Augmentation is a uniformly random crop plus an optional horizontal flip;
density targets are regenerated from the cropped point set rather than
cropped out of a precomputed map, so target sums always equal the visible
head counts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .density import KernelSpec, PointSet, downsample_sum, generate_density
from .model import Model, ParameterStore, save_checkpoint
from .tensor import ShapeError, Tensor4

__all__ = [
    "TrainConfig",
    "OptimizerState",
    "TrainingDiverged",
    "euclidean_loss",
    "sgd_step",
    "augment",
    "train",
]

OUTPUT_SCALE = 4  # network output is input/4 per spatial dim


class TrainingDiverged(RuntimeError):
    """Loss became NaN/Inf; carries the offending iteration index."""

    def __init__(self, iteration: int, loss: float):
        super().__init__(f"loss diverged to {loss} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 4
    iterations: int = 300
    crop: tuple[int, int] = (64, 64)  # (height, width)
    flip_probability: float = 0.5
    seed: int = 0
    # Optional step schedule; 0 keeps the learning rate fixed.
    lr_decay_every: int = 0
    lr_decay_factor: float = 0.1
    checkpoint_every: int = 0  # 0 = final checkpoint only

    def __post_init__(self):
        ch, cw = self.crop
        if ch % OUTPUT_SCALE or cw % OUTPUT_SCALE:
            raise ValueError(f"crop dims {ch}x{cw} must be divisible by {OUTPUT_SCALE}")
        if self.batch_size < 1 or self.iterations < 1:
            raise ValueError("batch_size and iterations must be >= 1")
        if not 0.0 <= self.flip_probability <= 1.0:
            raise ValueError(f"flip_probability must be in [0,1], got {self.flip_probability}")

    def learning_rate_at(self, iteration: int) -> float:
        if self.lr_decay_every <= 0:
            return self.learning_rate
        return self.learning_rate * self.lr_decay_factor ** (iteration // self.lr_decay_every)


class OptimizerState:
    """One velocity buffer per owner learnable; shared parameters get one."""

    def __init__(self, store: ParameterStore):
        self.velocity = {name: np.zeros_like(value)
                         for name, value, _, _ in store.learnable_arrays()}


def euclidean_loss(pred: Tensor4, target: Tensor4) -> tuple[float, Tensor4]:
    """Half the squared map difference, averaged over batch and map cells.

    loss = 1/(2*N*E) * sum((pred-target)^2) with N the batch size and E the
    elements per sample; grad = (pred-target)/(N*E). Averaging over cells
    (not just the batch) keeps the update magnitude independent of crop
    size, which is what lets the stock learning rate of 0.01 hold across
    crop configurations.
    """
    if pred.shape != target.shape:
        raise ShapeError(f"loss: pred {pred.shape} vs target {target.shape}")
    n = pred.shape[0]
    if n < 1:
        raise ShapeError("loss: batch size must be >= 1")
    denom = float(n * pred.data[0].size)
    diff = pred.data - target.data
    loss = float((diff * diff).sum()) / (2.0 * denom)
    return loss, Tensor4(diff / denom)


def sgd_step(store: ParameterStore, state: OptimizerState, cfg: TrainConfig,
             learning_rate: float | None = None) -> None:
    """v <- momentum*v - lr*(g + wd*w); w <- w + v; gradients cleared after."""
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    for name, value, grad, decay in store.learnable_arrays():
        if grad is None:
            raise RuntimeError(f"sgd_step: no gradient for {name}; run backward first")
        g = grad + cfg.weight_decay * value if (decay and cfg.weight_decay) else grad
        v = state.velocity[name]
        v *= cfg.momentum
        v -= lr * g
        value += v
    store.zero_grad()


def augment(image: Tensor4, points: PointSet, cfg: TrainConfig,
            rng: np.random.Generator) -> tuple[Tensor4, PointSet]:
    """Random crop plus optional horizontal flip; points follow the pixels.

    A flip maps x to crop_width-1-x (pixel-center mirror). Points that fall
    outside the crop are dropped.
    """
    _, _, h, w = image.shape
    ch, cw = cfg.crop
    if ch > h or cw > w:
        raise ValueError(f"crop {ch}x{cw} larger than image {h}x{w}")
    oy = int(rng.integers(0, h - ch + 1))
    ox = int(rng.integers(0, w - cw + 1))
    patch = image.data[:, :, oy:oy + ch, ox:ox + cw].copy()

    pts = points.points
    keep = ((pts[:, 0] >= ox) & (pts[:, 0] < ox + cw)
            & (pts[:, 1] >= oy) & (pts[:, 1] < oy + ch))
    shifted = pts[keep] - np.array([ox, oy], dtype=np.float64)

    if rng.random() < cfg.flip_probability:
        patch = patch[:, :, :, ::-1].copy()
        if shifted.size:
            shifted[:, 0] = np.maximum(cw - 1 - shifted[:, 0], 0.0)
    return Tensor4(patch), PointSet(shifted, (cw, ch))


def _batch_targets(point_sets: Sequence[PointSet], kernel: KernelSpec,
                   dtype=np.float32) -> Tensor4:
    maps = [downsample_sum(generate_density(ps, kernel), OUTPUT_SCALE) for ps in point_sets]
    return Tensor4(np.stack([m.grid for m in maps])[:, None].astype(dtype))


def train(model: Model, dataset: Sequence, cfg: TrainConfig,
          kernel: KernelSpec | None = None, out_dir: str | Path | None = None,
          log_every: int = 0) -> list[float]:
    """Run cfg.iterations batched SGD steps; returns the per-iteration losses.

    Batches are sampled with replacement from a generator seeded by
    cfg.seed, so identical seed and config reproduce the loss trace exactly.
    When out_dir is given, writes loss.csv and checkpoint files there.
    """
    if not dataset:
        raise ValueError("train: dataset is empty")
    kernel = kernel or KernelSpec()
    for entry in dataset:
        _, _, h, w = entry.image.shape
        if cfg.crop[0] > h or cfg.crop[1] > w:
            raise ValueError(f"crop {cfg.crop} exceeds image {entry.image_id} ({h}x{w})")

    rng = np.random.default_rng(cfg.seed)
    state = OptimizerState(model.store)
    losses: list[float] = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    for it in range(cfg.iterations):
        idx = rng.integers(0, len(dataset), size=cfg.batch_size)
        images, point_sets = [], []
        for i in idx:
            img, pts = augment(dataset[i].image, dataset[i].points, cfg, rng)
            images.append(img.data)
            point_sets.append(pts)
        batch = Tensor4(np.concatenate(images, axis=0))
        target = _batch_targets(point_sets, kernel)

        pred = model.forward(batch, mode="train")
        loss, grad = euclidean_loss(pred, target)
        if not np.isfinite(loss):
            raise TrainingDiverged(it, loss)
        model.backward(grad)
        sgd_step(model.store, state, cfg, cfg.learning_rate_at(it))
        losses.append(loss)

        if log_every and (it + 1) % log_every == 0:
            print(f"iteration {it + 1}/{cfg.iterations} loss {loss:.6f}")
        if out_path is not None and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(out_path / f"checkpoint_{it + 1:06d}.drck", model)

    if out_path is not None:
        save_checkpoint(out_path / "checkpoint_final.drck", model)
        write_loss_trace(out_path / "loss.csv", losses)
    return losses


def write_loss_trace(path: str | Path, losses: Sequence[float]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "loss"])
        for i, loss in enumerate(losses):
            writer.writerow([i, repr(float(loss))])


def read_loss_trace(path: str | Path) -> list[float]:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return [float(loss) for _, loss in rows[1:]]
