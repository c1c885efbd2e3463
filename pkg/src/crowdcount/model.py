"""Residual crowd-density regressors with optional recursive weight sharing.

All five architectures share one template: a 3->C stem (Conv&BN&ReLU), 2x2
max pool, residual module 1, another 2x2 max pool, one or more residual
modules at quarter resolution, and a 1x1 reconstruction convolution down to
a single-channel density map. A residual module is 3 blocks of two
Conv&BN&ReLU stages plus an identity shortcut.

  resnet14 / resnet20 / resnet26   2 / 3 / 4 distinct modules
  r_resnet                         module 1 applied recursion_depth times
  dr_resnet                        module 2 applied recursion_depth times

Recursive applications alias one parameter set, so the unrolled network is
deeper than a plain resnet14 while owning exactly resnet14's parameters;
backward accumulates each application's contribution into the shared
buffers. Channel width defaults to 16, which is what makes the conv-weight
counts land on 0.028M / 0.042M / 0.056M for depths 14 / 20 / 26.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .tensor import (
    BatchNormParams,
    ConvParams,
    ShapeError,
    Tensor4,
    add,
    batchnorm,
    batchnorm_backward,
    conv2d,
    conv2d_backward,
    maxpool2,
    maxpool2_backward,
    read_tensor_stream,
    relu,
    relu_backward,
    tensor_to_bytes,
)

__all__ = [
    "ARCHITECTURES",
    "ModelSpec",
    "ParameterStore",
    "ResnetBlock",
    "Model",
    "build",
    "save_checkpoint",
    "load_checkpoint",
]

ARCHITECTURES = ("resnet14", "resnet20", "resnet26", "r_resnet", "dr_resnet")

BLOCKS_PER_MODULE = 3
BN_EPSILON = 1e-5
# Running-stat retention per forward. 0.9 leaves ~1e-14 of the init stats
# after a 300-iteration run; 0.99 would still carry ~5% of them into eval
# mode, which compounds into a visible count bias across 26 BN applications.
BN_MOMENTUM = 0.9

DRCK_MAGIC = b"DRCK"
DRCK_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    """Architecture selector: name, channel width, recursion depth."""

    arch: str
    channels: int = 16
    recursion_depth: int = 3

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown arch {self.arch!r}, expected one of {ARCHITECTURES}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.recursion_depth < 1:
            raise ValueError(f"recursion_depth must be >= 1, got {self.recursion_depth}")

    @property
    def owned_modules(self) -> int:
        """Number of distinct residual modules (each 6 conv layers of params)."""
        return {"resnet14": 2, "resnet20": 3, "resnet26": 4,
                "r_resnet": 2, "dr_resnet": 2}[self.arch]

    def to_dict(self) -> dict:
        return {"arch": self.arch, "channels": self.channels,
                "recursion_depth": self.recursion_depth}


@dataclass
class ResnetBlock:
    """Two Conv&BN&ReLU stages joined to the input by an identity shortcut."""

    conv1: ConvParams
    bn1: BatchNormParams
    conv2: ConvParams
    bn2: BatchNormParams

    def stages(self) -> Iterator[tuple[str, object]]:
        yield "conv1", self.conv1
        yield "bn1", self.bn1
        yield "conv2", self.conv2
        yield "bn2", self.bn2


class ParameterStore:
    """Named owner entries; shared layers are referenced, never copied."""

    def __init__(self):
        self._entries: dict[str, ConvParams | BatchNormParams] = {}

    def add(self, name: str, params: ConvParams | BatchNormParams) -> None:
        if name in self._entries:
            raise ValueError(f"duplicate parameter entry {name!r}")
        self._entries[name] = params

    def __getitem__(self, name: str):
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def zero_grad(self) -> None:
        for p in self._entries.values():
            p.zero_grad()

    def learnable_arrays(self) -> Iterator[tuple[str, np.ndarray, np.ndarray | None, bool]]:
        """Yield (name, value, grad, decay) per learnable buffer.

        ``decay`` marks buffers subject to weight decay; BN gamma/beta are
        exempt. Values are the live arrays, so in-place updates train the
        model.
        """
        for name, p in self._entries.items():
            if isinstance(p, ConvParams):
                yield f"{name}.weight", p.weights.data, p.weights.grad, True
                if p.bias is not None:
                    yield f"{name}.bias", p.bias, p.bias_grad, True
            else:
                yield f"{name}.gamma", p.gamma, p.gamma_grad, False
                yield f"{name}.beta", p.beta, p.beta_grad, False


# Init scales. Hidden convs are He-style (variance 2/fan_in, the usual
# choice under ReLU). The reconstruction head is a linear regression layer,
# so it starts near zero: predictions then begin near the zero map instead
# of at the trunk's activation scale. Each block's second BN starts with a
# small gamma so residual branches begin almost-identity; together these
# keep the head's curvature low enough for the stock learning rate. Gamma
# must stay nonzero: the branch ReLU would otherwise block all gradient
# into the branch forever.
RECON_INIT_STD = 0.01
RESIDUAL_BN_GAMMA = 0.1


def _he_conv(rng: np.random.Generator, out_c: int, in_c: int, k: int,
             with_bias: bool, dtype, std: float | None = None) -> ConvParams:
    fan_in = in_c * k * k
    if std is None:
        std = np.sqrt(2.0 / fan_in)
    w = rng.normal(0.0, std, size=(out_c, in_c, k, k)).astype(dtype)
    bias = np.zeros(out_c, dtype=dtype) if with_bias else None
    return ConvParams(Tensor4(w), bias)


def _pool_argmax(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    win = (x.reshape(n, c, h // 2, 2, w // 2, 2)
           .transpose(0, 1, 2, 4, 3, 5)
           .reshape(n, c, h // 2, w // 2, 4))
    return win.argmax(axis=-1)


@dataclass
class _BlockCache:
    block: ResnetBlock
    x: Tensor4
    c1: Tensor4
    b1: Tensor4
    r1: Tensor4
    c2: Tensor4
    b2: Tensor4


@dataclass
class _ForwardCache:
    mode: str
    x: Tensor4
    stem_conv_out: Tensor4
    stem_bn_out: Tensor4
    pool1_in: Tensor4
    pre_blocks: list[_BlockCache]
    pool2_in: Tensor4
    post_blocks: list[_BlockCache]
    recon_in: Tensor4


def _bn_view(owner: BatchNormParams) -> BatchNormParams:
    """A per-application view of a shared BN layer.

    gamma/beta (and their grad buffers) alias the owner, so learning stays
    shared and gradients accumulate across applications; the running
    statistics are private, because each application of a recursive module
    sees a different activation distribution and eval mode would otherwise
    normalize every application with a blend of all of them.
    """
    owner.ensure_grads()
    view = BatchNormParams(
        gamma=owner.gamma,
        beta=owner.beta,
        running_mean=owner.running_mean.copy(),
        running_var=owner.running_var.copy(),
        epsilon=owner.epsilon,
        momentum=owner.momentum,
        mode=owner.mode,
    )
    view.gamma_grad = owner.gamma_grad
    view.beta_grad = owner.beta_grad
    return view


def _unroll(module: list[ResnetBlock], repeats: int) -> list[ResnetBlock]:
    """Application sequence for a module applied ``repeats`` times.

    The first application uses the owner objects; later ones share conv
    parameters by reference and get BN views with private running stats.
    """
    apps = list(module)
    for _ in range(repeats - 1):
        apps.extend(ResnetBlock(b.conv1, _bn_view(b.bn1), b.conv2, _bn_view(b.bn2))
                    for b in module)
    return apps


class Model:
    """A built network: owned parameters plus the unrolled application plan."""

    def __init__(self, spec: ModelSpec, store: ParameterStore, stem_conv: ConvParams,
                 stem_bn: BatchNormParams, modules: list[list[ResnetBlock]],
                 recon: ConvParams, seed: int):
        self.spec = spec
        self.store = store
        self.stem_conv = stem_conv
        self.stem_bn = stem_bn
        self.modules = modules
        self.recon = recon
        self.seed = seed
        self.last_conv_count = 0
        self._cache: _ForwardCache | None = None
        pre_repeats = spec.recursion_depth if spec.arch == "r_resnet" else 1
        self.pre_apps = _unroll(modules[0], pre_repeats)
        if spec.arch == "dr_resnet":
            self.post_apps = _unroll(modules[1], spec.recursion_depth)
        else:
            self.post_apps = [b for module in modules[1:] for b in module]

    def _all_bn_params(self) -> Iterator[BatchNormParams]:
        yield self.stem_bn
        for block in self.pre_apps + self.post_apps:
            yield block.bn1
            yield block.bn2

    def set_mode(self, mode: str) -> None:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        for bn in self._all_bn_params():
            bn.mode = mode

    # -- forward / backward ---------------------------------------------------

    def forward(self, batch: Tensor4, mode: str = "eval") -> Tensor4:
        """Run the network; output is (n, 1, h/4, w/4).

        Train mode caches every application's activations so backward can
        accumulate shared-parameter gradients; eval mode caches nothing and
        uses BN running statistics.
        """
        n, c, h, w = batch.shape
        if c != self.stem_conv.in_channels:
            raise ShapeError(f"expected {self.stem_conv.in_channels}-channel input, got {c}")
        if h % 4 or w % 4:
            raise ShapeError(
                f"input spatial dims {h}x{w} must be divisible by 4; crop to "
                f"{h - h % 4}x{w - w % 4} first")
        self.set_mode(mode)
        self.last_conv_count = 0
        caching = mode == "train"

        def cbr(x: Tensor4, conv: ConvParams, bn: BatchNormParams) -> tuple[Tensor4, Tensor4, Tensor4]:
            self.last_conv_count += 1
            co = conv2d(x, conv)
            bo = batchnorm(co, bn)
            return co, bo, relu(bo)

        def run_block(block: ResnetBlock, x: Tensor4) -> tuple[Tensor4, _BlockCache | None]:
            c1, b1, r1 = cbr(x, block.conv1, block.bn1)
            c2, b2, r2 = cbr(r1, block.conv2, block.bn2)
            out = add(r2, x)
            cache = _BlockCache(block, x, c1, b1, r1, c2, b2) if caching else None
            return out, cache

        stem_c, stem_b, t = cbr(batch, self.stem_conv, self.stem_bn)
        pool1_in = t
        t = maxpool2(t)

        pre_caches: list[_BlockCache] = []
        for block in self.pre_apps:
            t, bc = run_block(block, t)
            if caching:
                pre_caches.append(bc)  # type: ignore[arg-type]

        pool2_in = t
        t = maxpool2(t)

        post_caches: list[_BlockCache] = []
        for block in self.post_apps:
            t, bc = run_block(block, t)
            if caching:
                post_caches.append(bc)  # type: ignore[arg-type]

        recon_in = t
        self.last_conv_count += 1
        out = conv2d(t, self.recon)

        if caching:
            self._cache = _ForwardCache(mode, batch, stem_c, stem_b, pool1_in,
                                        pre_caches, pool2_in, post_caches, recon_in)
        else:
            self._cache = None
        return out

    def backward(self, output_grad: Tensor4) -> Tensor4:
        """Chain-rule pass over the cached forward; returns the input gradient.

        Every application of a shared block adds its gradient contribution
        into the one owning parameter set.
        """
        cache = self._cache
        if cache is None:
            raise RuntimeError("backward called without a cached train-mode forward")
        self.set_mode(cache.mode)

        def block_backward(bc: _BlockCache, dy: Tensor4) -> Tensor4:
            blk = bc.block
            g = relu_backward(bc.b2, dy)
            g = batchnorm_backward(bc.c2, blk.bn2, g)
            g = conv2d_backward(bc.r1, blk.conv2, g)
            g = relu_backward(bc.b1, g)
            g = batchnorm_backward(bc.c1, blk.bn1, g)
            g = conv2d_backward(bc.x, blk.conv1, g)
            return add(g, dy)  # shortcut passes the output grad through

        g = conv2d_backward(cache.recon_in, self.recon, output_grad)
        for bc in reversed(cache.post_blocks):
            g = block_backward(bc, g)
        g = maxpool2_backward(cache.pool2_in, g)
        for bc in reversed(cache.pre_blocks):
            g = block_backward(bc, g)
        g = maxpool2_backward(cache.pool1_in, g)
        g = relu_backward(cache.stem_bn_out, g)
        g = batchnorm_backward(cache.stem_conv_out, self.stem_bn, g)
        g = conv2d_backward(cache.x, self.stem_conv, g)
        return g

    def zero_grad(self) -> None:
        self.store.zero_grad()

    def activation_pattern(self) -> bytes:
        """Fingerprint of the piecewise-linear region the cached forward hit.

        Concatenates every ReLU sign mask and max-pool argmax. Two forwards
        with equal fingerprints lie in the same smooth region, which is the
        validity condition for comparing analytic gradients against finite
        differences (a central difference straddling a ReLU kink or an
        argmax flip measures the average of two different slopes).
        """
        cache = self._cache
        if cache is None:
            raise RuntimeError("activation_pattern needs a cached train-mode forward")
        parts = [np.packbits(cache.stem_bn_out.data > 0).tobytes()]
        for bc in cache.pre_blocks + cache.post_blocks:
            parts.append(np.packbits(bc.b1.data > 0).tobytes())
            parts.append(np.packbits(bc.b2.data > 0).tobytes())
        for pooled in (cache.pool1_in, cache.pool2_in):
            win = _pool_argmax(pooled.data)
            parts.append(win.astype(np.uint8).tobytes())
        return b"".join(parts)

    # -- accounting -----------------------------------------------------------

    def count_parameters(self, mode: str = "conv_weights") -> int:
        """conv_weights counts convolution weight elements; all_learnable adds
        conv biases and BN gamma/beta (running stats are state, not learned)."""
        if mode not in ("conv_weights", "all_learnable"):
            raise ValueError(f"unknown count mode {mode!r}")
        total = 0
        for _, p in self.store.items():
            if isinstance(p, ConvParams):
                total += p.weights.data.size
                if mode == "all_learnable" and p.bias is not None:
                    total += p.bias.size
            elif mode == "all_learnable":
                total += p.gamma.size + p.beta.size
        return total

    def astype(self, dtype) -> "Model":
        """Deep-convert to another float dtype, preserving sharing structure."""
        store = ParameterStore()
        stem_conv = self.stem_conv.astype(dtype)
        stem_bn = self.stem_bn.astype(dtype)
        store.add("stem.conv", stem_conv)
        store.add("stem.bn", stem_bn)
        modules: list[list[ResnetBlock]] = []
        for mi, module in enumerate(self.modules, start=1):
            new_module = []
            for bi, block in enumerate(module, start=1):
                nb = ResnetBlock(block.conv1.astype(dtype), block.bn1.astype(dtype),
                                 block.conv2.astype(dtype), block.bn2.astype(dtype))
                prefix = f"module{mi}.block{bi}"
                store.add(f"{prefix}.conv1", nb.conv1)
                store.add(f"{prefix}.bn1", nb.bn1)
                store.add(f"{prefix}.conv2", nb.conv2)
                store.add(f"{prefix}.bn2", nb.bn2)
                new_module.append(nb)
            modules.append(new_module)
        recon = self.recon.astype(dtype)
        store.add("recon.conv", recon)
        converted = Model(self.spec, store, stem_conv, stem_bn, modules, recon, self.seed)
        for mine, theirs in zip(self.pre_apps + self.post_apps,
                                converted.pre_apps + converted.post_apps):
            for bn_old, bn_new in ((mine.bn1, theirs.bn1), (mine.bn2, theirs.bn2)):
                bn_new.running_mean[:] = bn_old.running_mean.astype(dtype)
                bn_new.running_var[:] = bn_old.running_var.astype(dtype)
        return converted


def build(spec: ModelSpec, seed: int = 0, dtype=np.float32) -> Model:
    """Construct and initialize a model (He-style conv init, BN at identity)."""
    rng = np.random.default_rng(seed)
    ch = spec.channels
    store = ParameterStore()

    stem_conv = _he_conv(rng, ch, 3, 3, with_bias=False, dtype=dtype)
    stem_bn = BatchNormParams.create(ch, BN_EPSILON, BN_MOMENTUM, dtype=dtype)
    store.add("stem.conv", stem_conv)
    store.add("stem.bn", stem_bn)

    modules: list[list[ResnetBlock]] = []
    for mi in range(1, spec.owned_modules + 1):
        module = []
        for bi in range(1, BLOCKS_PER_MODULE + 1):
            block = ResnetBlock(
                conv1=_he_conv(rng, ch, ch, 3, with_bias=False, dtype=dtype),
                bn1=BatchNormParams.create(ch, BN_EPSILON, BN_MOMENTUM, dtype=dtype),
                conv2=_he_conv(rng, ch, ch, 3, with_bias=False, dtype=dtype),
                bn2=BatchNormParams.create(ch, BN_EPSILON, BN_MOMENTUM, dtype=dtype),
            )
            block.bn2.gamma[:] = RESIDUAL_BN_GAMMA
            prefix = f"module{mi}.block{bi}"
            store.add(f"{prefix}.conv1", block.conv1)
            store.add(f"{prefix}.bn1", block.bn1)
            store.add(f"{prefix}.conv2", block.conv2)
            store.add(f"{prefix}.bn2", block.bn2)
            module.append(block)
        modules.append(module)

    recon = _he_conv(rng, 1, ch, 1, with_bias=True, dtype=dtype, std=RECON_INIT_STD)
    store.add("recon.conv", recon)
    return Model(spec, store, stem_conv, stem_bn, modules, recon, seed)


# ---------------------------------------------------------------------------
# DRCK checkpoints: magic, version, JSON header, named DRT4 records
# ---------------------------------------------------------------------------

def _named_tensors(model: Model) -> list[tuple[str, np.ndarray]]:
    out: list[tuple[str, np.ndarray]] = []
    for name, p in model.store.items():
        if isinstance(p, ConvParams):
            out.append((f"{name}.weight", p.weights.data))
            if p.bias is not None:
                out.append((f"{name}.bias", p.bias))
        else:
            out.append((f"{name}.gamma", p.gamma))
            out.append((f"{name}.beta", p.beta))
            out.append((f"{name}.running_mean", p.running_mean))
            out.append((f"{name}.running_var", p.running_var))
    return out


def _view_stat_records(model: Model) -> list[tuple[str, np.ndarray]]:
    """Private running stats of recursive applications beyond the first."""
    if model.spec.arch == "r_resnet":
        groups = [("module1", model.pre_apps)]
    elif model.spec.arch == "dr_resnet":
        groups = [("module2", model.post_apps)]
    else:
        return []
    out: list[tuple[str, np.ndarray]] = []
    for mod_name, apps in groups:
        for i, block in enumerate(apps):
            app, b = divmod(i, BLOCKS_PER_MODULE)
            if app == 0:
                continue  # first application is the owner, already recorded
            for bn_name, bn in (("bn1", block.bn1), ("bn2", block.bn2)):
                prefix = f"{mod_name}.block{b + 1}.{bn_name}.app{app}"
                out.append((f"{prefix}.running_mean", bn.running_mean))
                out.append((f"{prefix}.running_var", bn.running_var))
    return out


def _as_tensor4(arr: np.ndarray) -> Tensor4:
    if arr.ndim == 4:
        return Tensor4(arr)
    return Tensor4(arr.reshape(1, 1, 1, -1))


def save_checkpoint(path: str | Path, model: Model) -> None:
    records = _named_tensors(model) + _view_stat_records(model)
    header = {
        "spec": model.spec.to_dict(),
        "decisions": {
            "channels": model.spec.channels,
            "pooling": "2x2 max pool after stem and after module 1",
            "bn_epsilon": BN_EPSILON,
            "bn_momentum": BN_MOMENTUM,
            "conv_bias": "reconstruction layer only",
            "init": "he_normal",
            "seed": model.seed,
        },
        "record_count": len(records),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(DRCK_MAGIC)
    buf.write(struct.pack("<2I", DRCK_VERSION, len(header_bytes)))
    buf.write(header_bytes)
    for name, arr in records:
        name_b = name.encode()
        buf.write(struct.pack("<I", len(name_b)))
        buf.write(name_b)
        buf.write(tensor_to_bytes(_as_tensor4(arr)))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> Model:
    raw = Path(path).read_bytes()
    f = io.BytesIO(raw)
    magic = f.read(4)
    if magic != DRCK_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {magic!r}")
    version, header_len = struct.unpack("<2I", f.read(8))
    if version != DRCK_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(f.read(header_len).decode())
    spec = ModelSpec(**header["spec"])
    model = build(spec, seed=int(header["decisions"].get("seed", 0)))

    expected = dict(_named_tensors(model) + _view_stat_records(model))
    seen = set()
    for _ in range(int(header["record_count"])):
        (name_len,) = struct.unpack("<I", f.read(4))
        name = f.read(name_len).decode()
        t = read_tensor_stream(f)
        if name not in expected:
            raise ValueError(f"{path}: unexpected tensor record {name!r}")
        dest = expected[name]
        flat = t.data.reshape(dest.shape)
        dest[:] = flat.astype(dest.dtype)
        seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise ValueError(f"{path}: checkpoint missing tensors {sorted(missing)}")
    return model
