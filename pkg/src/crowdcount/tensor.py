"""Dense 4-D tensor engine with analytic backward passes.

Everything operates on (batch, channel, height, width) float arrays. The
layer set is fixed: same-padding stride-1 convolution, batch normalization,
ReLU, 2x2 max pooling and elementwise addition. Each forward op has a
matching ``*_backward`` that takes the forward inputs plus the output
gradient, so no tape is needed; callers keep the activations they want to
differentiate through.

Parameter gradients accumulate (+=) into the owning buffers, which is what
makes weight sharing work: every application of a shared layer adds its
contribution before the optimizer consumes the sum.

Production arrays are float32; float64 is accepted everywhere and is used
by the finite-difference harness, where float32 rounding would swamp the
check.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

__all__ = [
    "ShapeError",
    "Tensor4",
    "ConvParams",
    "BatchNormParams",
    "conv2d",
    "conv2d_backward",
    "batchnorm",
    "batchnorm_backward",
    "relu",
    "relu_backward",
    "maxpool2",
    "maxpool2_backward",
    "add",
    "add_backward",
    "write_tensor",
    "read_tensor",
    "read_tensor_stream",
    "tensor_to_bytes",
    "tensor_from_bytes",
]


class ShapeError(ValueError):
    """Raised when an operation receives tensors of incompatible shape."""


class Tensor4:
    """A (n, c, h, w) float array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad")

    def __init__(self, data: np.ndarray, grad: np.ndarray | None = None):
        data = np.asarray(data)
        if data.ndim != 4:
            raise ShapeError(f"Tensor4 needs 4 dims (n,c,h,w), got shape {data.shape}")
        if grad is not None and grad.shape != data.shape:
            raise ShapeError(f"grad shape {grad.shape} != data shape {data.shape}")
        self.data = data
        self.grad = grad

    @classmethod
    def zeros(cls, shape: tuple[int, int, int, int], dtype=np.float32) -> "Tensor4":
        return cls(np.zeros(shape, dtype=dtype))

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def dtype(self):
        return self.data.dtype

    def ensure_grad(self) -> np.ndarray:
        """Allocate a zero gradient buffer if absent; return it."""
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad.fill(0)

    def astype(self, dtype) -> "Tensor4":
        return Tensor4(self.data.astype(dtype),
                       None if self.grad is None else self.grad.astype(dtype))

    def copy(self) -> "Tensor4":
        return Tensor4(self.data.copy(), None if self.grad is None else self.grad.copy())

    def __repr__(self) -> str:
        return f"Tensor4(shape={self.shape}, dtype={self.data.dtype})"


def _require_same_shape(a: Tensor4, b: Tensor4, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# Convolution (stride 1, "same" padding)
# ---------------------------------------------------------------------------

class ConvParams:
    """Weights and optional bias of one convolution layer.

    ``weights`` is a Tensor4 of shape (out_channels, in_channels, kH, kW);
    its grad buffer receives accumulated weight gradients. Kernel sizes are
    restricted to 1 and 3, stride is fixed at 1, and padding is always
    (k-1)/2 so spatial dims are preserved.
    """

    __slots__ = ("weights", "bias", "bias_grad")

    def __init__(self, weights: Tensor4, bias: np.ndarray | None = None):
        oc, ic, kh, kw = weights.shape
        if kh not in (1, 3) or kw not in (1, 3):
            raise ShapeError(f"kernel sizes must be 1 or 3, got {kh}x{kw}")
        if bias is not None:
            bias = np.asarray(bias)
            if bias.shape != (oc,):
                raise ShapeError(f"bias shape {bias.shape} != ({oc},)")
        self.weights = weights
        self.bias = bias
        self.bias_grad: np.ndarray | None = None

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def padding(self) -> tuple[int, int]:
        _, _, kh, kw = self.weights.shape
        return (kh - 1) // 2, (kw - 1) // 2

    def ensure_bias_grad(self) -> np.ndarray:
        if self.bias_grad is None:
            self.bias_grad = np.zeros_like(self.bias)
        return self.bias_grad

    def zero_grad(self) -> None:
        self.weights.zero_grad()
        if self.bias_grad is not None:
            self.bias_grad.fill(0)

    def astype(self, dtype) -> "ConvParams":
        p = ConvParams(self.weights.astype(dtype),
                       None if self.bias is None else self.bias.astype(dtype))
        return p


def _im2col(padded: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Rows of all kh x kw patches, batch-major then row-major spatially."""
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(2, 3))
    n, c, h, w = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * kh * kw)


def _conv_raw(x: np.ndarray, w: np.ndarray, pad: tuple[int, int]) -> np.ndarray:
    """Cross-correlation of (n,c,h,w) with (oc,c,kh,kw), stride 1."""
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    ph, pw = pad
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(x, kh, kw)
    out = cols @ w.reshape(oc, -1).T
    return out.reshape(n, h, wd, oc).transpose(0, 3, 1, 2)


def _check_conv_input(x: Tensor4, params: ConvParams) -> None:
    n, c, h, w = x.shape
    if n == 0:
        raise ShapeError("conv2d: zero-sized batch")
    if c != params.in_channels:
        raise ShapeError(
            f"conv2d: input has {c} channels, weights expect {params.in_channels}"
        )
    if h < 1 or w < 1:
        raise ShapeError(f"conv2d: spatial dims must be >= 1, got {h}x{w}")


def conv2d(x: Tensor4, params: ConvParams) -> Tensor4:
    """Same-padding stride-1 convolution; output is (n, out_channels, h, w)."""
    _check_conv_input(x, params)
    y = _conv_raw(x.data, params.weights.data, params.padding)
    if params.bias is not None:
        y = y + params.bias[None, :, None, None]
    return Tensor4(y)


def conv2d_backward(x: Tensor4, params: ConvParams, dy: Tensor4) -> Tensor4:
    """Input gradient of conv2d; weight (and bias) grads accumulate in params.

    Calling twice with the same output gradient doubles the accumulated
    weight gradient, which is the contract shared layers rely on.
    """
    _check_conv_input(x, params)
    n, c, h, w = x.shape
    oc, ic, kh, kw = params.weights.shape
    if dy.shape != (n, oc, h, w):
        raise ShapeError(f"conv2d_backward: dy shape {dy.shape} != {(n, oc, h, w)}")
    ph, pw = params.padding

    padded = x.data
    if ph or pw:
        padded = np.pad(padded, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    cols = _im2col(padded, kh, kw)
    dy_col = dy.data.transpose(0, 2, 3, 1).reshape(-1, oc)

    dw = (dy_col.T @ cols).reshape(oc, ic, kh, kw)
    wgrad = params.weights.ensure_grad()
    wgrad += dw
    if params.bias is not None:
        bgrad = params.ensure_bias_grad()
        bgrad += dy_col.sum(axis=0)

    # Input grad = correlation of dy with the spatially flipped, (oc,ic)-swapped kernel.
    w_flip = params.weights.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    dx = _conv_raw(dy.data, np.ascontiguousarray(w_flip), (ph, pw))
    return Tensor4(dx)


# ---------------------------------------------------------------------------
# Batch normalization
# ---------------------------------------------------------------------------

@dataclass
class BatchNormParams:
    """Per-channel affine batch normalization state.

    Train mode normalizes with batch statistics over (n, h, w) and updates
    the running buffers as ``running <- momentum*running + (1-momentum)*batch``;
    eval mode normalizes with the running buffers only.
    """

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.99
    mode: str = "train"
    gamma_grad: np.ndarray | None = field(default=None, repr=False)
    beta_grad: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        c = self.gamma.shape[0]
        for name in ("beta", "running_mean", "running_var"):
            v = getattr(self, name)
            if v.shape != (c,):
                raise ShapeError(f"BatchNormParams.{name} shape {v.shape} != ({c},)")
        if np.any(self.running_var < 0):
            raise ValueError("running_var entries must be >= 0")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must be in (0,1), got {self.momentum}")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")

    @classmethod
    def create(cls, channels: int, epsilon: float = 1e-5, momentum: float = 0.99,
               dtype=np.float32) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            epsilon=epsilon,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def ensure_grads(self) -> tuple[np.ndarray, np.ndarray]:
        if self.gamma_grad is None:
            self.gamma_grad = np.zeros_like(self.gamma)
        if self.beta_grad is None:
            self.beta_grad = np.zeros_like(self.beta)
        return self.gamma_grad, self.beta_grad

    def zero_grad(self) -> None:
        if self.gamma_grad is not None:
            self.gamma_grad.fill(0)
        if self.beta_grad is not None:
            self.beta_grad.fill(0)

    def astype(self, dtype) -> "BatchNormParams":
        return BatchNormParams(
            gamma=self.gamma.astype(dtype),
            beta=self.beta.astype(dtype),
            running_mean=self.running_mean.astype(dtype),
            running_var=self.running_var.astype(dtype),
            epsilon=self.epsilon,
            momentum=self.momentum,
            mode=self.mode,
        )


def _batch_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3))  # biased, matches the normalization denominator
    return mean, var


def _check_bn_input(x: Tensor4, params: BatchNormParams) -> int:
    n, c, h, w = x.shape
    if c != params.channels:
        raise ShapeError(f"batchnorm: input has {c} channels, params have {params.channels}")
    m = n * h * w
    if params.mode == "train" and m < 2:
        raise ShapeError("batchnorm: train mode needs n*h*w >= 2 per channel")
    return m


def batchnorm(x: Tensor4, params: BatchNormParams) -> Tensor4:
    """Normalize per channel and apply gamma*xhat + beta."""
    _check_bn_input(x, params)
    if params.mode == "train":
        mean, var = _batch_stats(x.data)
        mom = params.momentum
        params.running_mean[:] = mom * params.running_mean + (1.0 - mom) * mean
        params.running_var[:] = mom * params.running_var + (1.0 - mom) * var
    else:
        mean, var = params.running_mean, params.running_var
    inv_std = 1.0 / np.sqrt(var + params.epsilon)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = params.gamma[None, :, None, None] * xhat + params.beta[None, :, None, None]
    return Tensor4(y.astype(x.data.dtype, copy=False))


def batchnorm_backward(x: Tensor4, params: BatchNormParams, dy: Tensor4) -> Tensor4:
    """Full analytic gradient through the batch statistics (train mode).

    Batch statistics are recomputed from ``x``, so the forward pass does not
    need to be cached. gamma/beta grads accumulate in params.
    """
    m = _check_bn_input(x, params)
    _require_same_shape(x, dy, "batchnorm_backward")
    eps = params.epsilon
    g = params.gamma[None, :, None, None]

    if params.mode == "train":
        mean, var = _batch_stats(x.data)
    else:
        mean, var = params.running_mean, params.running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xc = x.data - mean[None, :, None, None]
    xhat = xc * inv_std[None, :, None, None]

    ggrad, bgrad = params.ensure_grads()
    ggrad += (dy.data * xhat).sum(axis=(0, 2, 3))
    bgrad += dy.data.sum(axis=(0, 2, 3))

    dxhat = dy.data * g
    if params.mode == "eval":
        return Tensor4(dxhat * inv_std[None, :, None, None])

    dvar = (dxhat * xc).sum(axis=(0, 2, 3)) * (-0.5) * inv_std ** 3
    dmean = -(dxhat.sum(axis=(0, 2, 3))) * inv_std + dvar * (-2.0 / m) * xc.sum(axis=(0, 2, 3))
    dx = (dxhat * inv_std[None, :, None, None]
          + dvar[None, :, None, None] * 2.0 * xc / m
          + dmean[None, :, None, None] / m)
    return Tensor4(dx.astype(x.data.dtype, copy=False))


# ---------------------------------------------------------------------------
# ReLU, 2x2 max pool, addition
# ---------------------------------------------------------------------------

def relu(x: Tensor4) -> Tensor4:
    return Tensor4(np.maximum(x.data, 0))


def relu_backward(x: Tensor4, dy: Tensor4) -> Tensor4:
    """Pass gradient where input > 0; the subgradient at 0 is taken as 0."""
    _require_same_shape(x, dy, "relu_backward")
    return Tensor4(np.where(x.data > 0, dy.data, 0))


def _pool_windows(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    # (..., 4) with window cells in row-major order so argmax ties break
    # to the first row-major position.
    return (x.reshape(n, c, h // 2, 2, w // 2, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, h // 2, w // 2, 4))


def maxpool2(x: Tensor4) -> Tensor4:
    """2x2 max pooling with stride 2; spatial dims must be even."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2: spatial dims must be even, got {h}x{w}; crop first")
    return Tensor4(_pool_windows(x.data).max(axis=-1))


def maxpool2_backward(x: Tensor4, dy: Tensor4) -> Tensor4:
    """Route gradient to each window's argmax (first row-major cell on ties)."""
    n, c, h, w = x.shape
    if dy.shape != (n, c, h // 2, w // 2):
        raise ShapeError(f"maxpool2_backward: dy shape {dy.shape} != {(n, c, h // 2, w // 2)}")
    win = _pool_windows(x.data)
    idx = win.argmax(axis=-1)
    dwin = np.zeros_like(win)
    np.put_along_axis(dwin, idx[..., None], dy.data[..., None], axis=-1)
    dx = (dwin.reshape(n, c, h // 2, w // 2, 2, 2)
          .transpose(0, 1, 2, 4, 3, 5)
          .reshape(n, c, h, w))
    return Tensor4(dx)


def add(a: Tensor4, b: Tensor4) -> Tensor4:
    _require_same_shape(a, b, "add")
    return Tensor4(a.data + b.data)


def add_backward(dy: Tensor4) -> tuple[Tensor4, Tensor4]:
    """Output gradient flows unchanged to both operands."""
    return Tensor4(dy.data.copy()), Tensor4(dy.data.copy())


# ---------------------------------------------------------------------------
# DRT4 binary serialization
# ---------------------------------------------------------------------------

DRT4_MAGIC = b"DRT4"
DRT4_VERSION = 1

PathLike = Union[str, Path]


def tensor_to_bytes(t: Tensor4) -> bytes:
    """Little-endian: magic "DRT4", u32 version, four u32 dims, f32 payload."""
    n, c, h, w = t.shape
    header = DRT4_MAGIC + struct.pack("<5I", DRT4_VERSION, n, c, h, w)
    return header + np.ascontiguousarray(t.data, dtype="<f4").tobytes()


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"truncated DRT4 record: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor_stream(f: BinaryIO) -> Tensor4:
    """Read one DRT4 record from the stream, leaving it positioned after it."""
    magic = _read_exact(f, 4)
    if magic != DRT4_MAGIC:
        raise ValueError(f"bad magic {magic!r}, expected {DRT4_MAGIC!r}")
    version, n, c, h, w = struct.unpack("<5I", _read_exact(f, 20))
    if version != DRT4_VERSION:
        raise ValueError(f"unsupported DRT4 version {version}")
    payload = _read_exact(f, 4 * n * c * h * w)
    data = np.frombuffer(payload, dtype="<f4").reshape(n, c, h, w).astype(np.float32)
    return Tensor4(data)


def tensor_from_bytes(buf: bytes) -> Tensor4:
    import io

    return read_tensor_stream(io.BytesIO(buf))


def write_tensor(dest: PathLike | BinaryIO, t: Tensor4) -> None:
    if hasattr(dest, "write"):
        dest.write(tensor_to_bytes(t))  # type: ignore[union-attr]
    else:
        Path(dest).write_bytes(tensor_to_bytes(t))


def read_tensor(src: PathLike | BinaryIO) -> Tensor4:
    if hasattr(src, "read"):
        return read_tensor_stream(src)  # type: ignore[arg-type]
    with open(src, "rb") as f:
        return read_tensor_stream(f)
