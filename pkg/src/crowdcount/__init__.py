"""Crowd counting with a deeply-recursive residual density regressor.

The package is self-contained: a small numpy tensor engine with analytic
gradients (``tensor``), Gaussian density-map ground truth (``density``), the
recursive weight-shared architectures (``model``), momentum-SGD training
(``training``), MAE/MSE evaluation and k-fold splits (``evaluation``),
dataset plumbing plus a synthetic generator (``data``), and a CLI (``cli``).
"""

__version__ = "0.1.0"

from .density import (
    DensityMap,
    KernelSpec,
    PointSet,
    adaptive_density,
    downsample_sum,
    fixed_density,
    generate_density,
    knn_mean_distance,
)
from .evaluation import MetricsReport, count_from_map, evaluate, kfold, metrics
from .model import ARCHITECTURES, Model, ModelSpec, ParameterStore, build, load_checkpoint, save_checkpoint
from .tensor import BatchNormParams, ConvParams, ShapeError, Tensor4
from .training import TrainConfig, TrainingDiverged, augment, euclidean_loss, sgd_step, train

__all__ = [
    "__version__",
    "ARCHITECTURES",
    "BatchNormParams",
    "ConvParams",
    "DensityMap",
    "KernelSpec",
    "MetricsReport",
    "Model",
    "ModelSpec",
    "ParameterStore",
    "PointSet",
    "ShapeError",
    "Tensor4",
    "TrainConfig",
    "TrainingDiverged",
    "adaptive_density",
    "augment",
    "build",
    "count_from_map",
    "downsample_sum",
    "euclidean_loss",
    "evaluate",
    "fixed_density",
    "generate_density",
    "kfold",
    "knn_mean_distance",
    "load_checkpoint",
    "metrics",
    "save_checkpoint",
    "sgd_step",
    "train",
]
