"""Command-line pipeline: density maps, training, evaluation, counting.

Subcommands: density, train, eval, count, params, synth, kfold. Global
flags: --seed, --deterministic, --config (JSON overriding defaults), --json
(machine-readable stdout). Precedence is defaults < config file < explicit
flags, and every run prints its fully resolved configuration before acting.

Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flags, missing
files, invalid configs).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .data import DatasetManifest, SynthConfig, load_dataset, read_image, synth_generate
from .density import (
    DensityMap,
    KernelSpec,
    downsample_sum,
    generate_density,
    read_annotation,
)
from .evaluation import count_from_map, evaluate, kfold
from .model import ARCHITECTURES, ModelSpec, build, load_checkpoint, save_checkpoint
from .tensor import Tensor4, write_tensor
from .training import TrainConfig, train
from .evaluation import MetricsReport

__all__ = ["main"]


class UsageError(Exception):
    """Invalid flags, configs or inputs; maps to exit code 2."""


# ---------------------------------------------------------------------------
# config plumbing
# ---------------------------------------------------------------------------

def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{p}: invalid config JSON: {e}") from e
    if not isinstance(doc, dict):
        raise UsageError(f"{p}: config JSON must be an object")
    return doc


def _resolve(defaults: dict, config: dict, cli: dict, allowed: set[str]) -> dict:
    """defaults < config-file keys < explicitly passed CLI flags."""
    out = dict(defaults)
    for key, value in config.items():
        if key in allowed:
            out[key] = value
    for key, value in cli.items():
        if value is not None:
            out[key] = value
    return out


def _dataclass_defaults(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            out[f.name] = f.default_factory()  # type: ignore[misc]
    return out


def _announce(resolved: dict, as_json: bool) -> None:
    line = "resolved config: " + json.dumps(resolved, sort_keys=True, default=str)
    print(line, file=sys.stderr if as_json else sys.stdout)


def _write_provenance(target: Path, args, resolved: dict) -> None:
    doc = {
        "command": ["crowdcount"] + list(args.raw_argv),
        "config": resolved,
        "seed": args.seed,
        "deterministic": args.deterministic,
        "version": __version__,
    }
    if target.is_dir():
        target = target / "provenance.json"
    else:
        target = target.with_name(target.name + ".provenance.json")
    target.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str))


def _parse_pair(text: str, flag: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    try:
        if len(parts) == 1:
            v = int(parts[0])
            return v, v
        if len(parts) == 2:
            return int(parts[0]), int(parts[1])
    except ValueError:
        pass
    raise UsageError(f"{flag} expects N or NxM, got {text!r}")


def _kernel_from(args, config: dict) -> tuple[KernelSpec, dict]:
    cli = {
        "mode": args.mode,
        "fixed_window": args.window,
        "fixed_sigma": args.sigma,
        "beta": args.beta,
        "k_neighbors": args.k,
    }
    resolved = _resolve(_dataclass_defaults(KernelSpec), config, cli,
                        {f.name for f in dataclasses.fields(KernelSpec)})
    try:
        return KernelSpec(**resolved), resolved
    except ValueError as e:
        raise UsageError(str(e)) from e


def _add_kernel_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=["fixed", "adaptive"], help="kernel mode")
    p.add_argument("--window", type=int, help="fixed kernel window (odd px)")
    p.add_argument("--sigma", type=float, help="fixed kernel sigma (px)")
    p.add_argument("--beta", type=float, help="adaptive sigma = beta * mean kNN distance")
    p.add_argument("--k", type=int, help="neighbors for adaptive kernels")


def _load_manifest(path: str, split: str = "all") -> DatasetManifest:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"manifest not found: {p}")
    try:
        manifest = DatasetManifest.read(p, split=split)
        manifest.validate()
    except (ValueError, FileNotFoundError) as e:
        raise UsageError(str(e)) from e
    return manifest


def _save_preview(path: Path, dmap: DensityMap) -> None:
    grid = np.maximum(dmap.grid, 0.0)
    peak = grid.max()
    pixels = (grid / peak * 255.0).round().astype(np.uint8) if peak > 0 else \
        np.zeros_like(grid, dtype=np.uint8)
    Image.fromarray(pixels, mode="L").save(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_density(args, config: dict) -> int:
    kernel, resolved = _kernel_from(args, config)
    resolved["downsample"] = args.downsample
    _announce(resolved, args.json)

    ann_paths: list[Path] = [Path(a) for a in args.annotations or []]
    if args.manifest:
        manifest = _load_manifest(args.manifest)
        ann_paths.extend(manifest.root / ann for _, ann in manifest.entries)
    if not ann_paths:
        raise UsageError("density: provide --annotations files or --manifest")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for ann_path in ann_paths:
        if not ann_path.exists():
            raise UsageError(f"annotation not found: {ann_path}")
        name, points, _ = read_annotation(ann_path)
        dmap = generate_density(points, kernel)
        if args.downsample > 1:
            dmap = downsample_sum(dmap, args.downsample)
        stem = Path(name).stem or ann_path.stem
        map_path = out_dir / f"{stem}.drt4"
        write_tensor(map_path, Tensor4(dmap.grid[None, None].astype(np.float32)))
        if args.preview:
            _save_preview(out_dir / f"{stem}.png", dmap)
        results.append({"id": stem, "count": dmap.total(), "path": str(map_path)})
    _write_provenance(out_dir, args, resolved)

    if args.json:
        print(json.dumps({"maps": results}, indent=2))
    else:
        for r in results:
            print(f"{r['id']}: sum={r['count']:.6f} -> {r['path']}")
    return 0


def _cmd_synth(args, config: dict) -> int:
    cli = {
        "train_count": args.train_count,
        "test_count": args.test_count,
        "image_size": _parse_pair(args.size, "--size") if args.size else None,
        "heads_min": args.heads_min,
        "heads_max": args.heads_max,
        "blob_radius": args.blob_radius,
        "noise_level": args.noise_level,
        "seed": args.seed,
    }
    resolved = _resolve(_dataclass_defaults(SynthConfig), config, cli,
                        {f.name for f in dataclasses.fields(SynthConfig)})
    resolved["image_size"] = tuple(resolved["image_size"])
    _announce(resolved, args.json)
    try:
        cfg = SynthConfig(**resolved)
    except ValueError as e:
        raise UsageError(str(e)) from e

    out_dir = Path(args.out)
    train_manifest, test_manifest = synth_generate(cfg, out_dir)
    _write_provenance(out_dir, args, resolved)
    if args.json:
        print(json.dumps({"train_manifest": str(train_manifest),
                          "test_manifest": str(test_manifest)}))
    else:
        print(f"wrote {train_manifest} and {test_manifest}")
    return 0


def _model_spec_from(args, config: dict) -> tuple[ModelSpec, dict]:
    cli = {"arch": getattr(args, "arch", None),
           "channels": getattr(args, "channels", None),
           "recursion_depth": getattr(args, "recursion_depth", None)}
    defaults = {"arch": "dr_resnet", "channels": 16, "recursion_depth": 3}
    resolved = _resolve(defaults, config, cli, set(defaults))
    try:
        return ModelSpec(**resolved), resolved
    except ValueError as e:
        raise UsageError(str(e)) from e


def _cmd_train(args, config: dict) -> int:
    spec, spec_resolved = _model_spec_from(args, config)
    kernel, kernel_resolved = _kernel_from(args, config)
    cli = {
        "learning_rate": args.learning_rate,
        "momentum": args.momentum,
        "weight_decay": args.weight_decay,
        "batch_size": args.batch_size,
        "iterations": args.iterations,
        "crop": _parse_pair(args.crop, "--crop") if args.crop else None,
        "flip_probability": args.flip_probability,
        "seed": args.seed,
        "lr_decay_every": args.lr_decay_every,
        "lr_decay_factor": args.lr_decay_factor,
        "checkpoint_every": args.checkpoint_every,
    }
    resolved = _resolve(_dataclass_defaults(TrainConfig), config, cli,
                        {f.name for f in dataclasses.fields(TrainConfig)})
    resolved["crop"] = tuple(resolved["crop"])
    full_config = {"model": spec_resolved, "kernel": kernel_resolved, "train": resolved}
    _announce(full_config, args.json)
    try:
        cfg = TrainConfig(**resolved)
    except ValueError as e:
        raise UsageError(str(e)) from e

    manifest = _load_manifest(args.manifest, split="train")
    dataset = load_dataset(manifest)
    if dataset.clamped_points:
        print(f"warning: clamped {dataset.clamped_points} out-of-bounds annotation points",
              file=sys.stderr)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build(spec, seed=args.seed)
    losses = train(model, dataset.entries, cfg, kernel=kernel, out_dir=out_dir,
                   log_every=args.log_every)
    _write_provenance(out_dir, args, full_config)

    checkpoint = out_dir / "checkpoint_final.drck"
    if args.json:
        print(json.dumps({"checkpoint": str(checkpoint), "final_loss": losses[-1],
                          "loss_csv": str(out_dir / "loss.csv")}))
    else:
        print(f"final loss {losses[-1]:.6f}; checkpoint at {checkpoint}")
    return 0


def _cmd_eval(args, config: dict) -> int:
    resolved = {"checkpoint": args.checkpoint, "manifest": args.manifest,
                "workers": 1 if args.deterministic else args.workers}
    _announce(resolved, args.json)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)
    manifest = _load_manifest(args.manifest, split="test")
    dataset = load_dataset(manifest, on_error="skip")
    report = evaluate(model, dataset.entries, skipped=dataset.skipped,
                      workers=resolved["workers"])
    if args.out:
        out_path = Path(args.out)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        report.write_json(out_path)
        _write_provenance(out_path, args, resolved)
    if args.json:
        print(json.dumps(report.to_dict(), indent=2))
    else:
        print(f"n={report.n} mae={report.mae:.4f} mse={report.mse:.4f}"
              + (f" skipped={len(report.skipped)}" if report.skipped else ""))
    return 0


def _cmd_count(args, config: dict) -> int:
    resolved = {"checkpoint": args.checkpoint}
    _announce(resolved, args.json)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    model = load_checkpoint(ckpt)

    paths: list[Path] = [Path(p) for p in args.images or []]
    if args.manifest:
        manifest = _load_manifest(args.manifest)
        paths.extend(manifest.image_paths())
    if not paths:
        raise UsageError("count: provide --images files or --manifest")

    results = []
    for path in paths:
        if not path.exists():
            raise UsageError(f"image not found: {path}")
        image = read_image(path)
        _, _, h, w = image.shape
        image = Tensor4(image.data[:, :, :h - h % 4, :w - w % 4])
        out = model.forward(image, mode="eval")
        results.append({"id": path.name, "count": count_from_map(out.data[0, 0])})
    if args.json:
        print(json.dumps({"counts": results}, indent=2))
    else:
        for r in results:
            print(f"{r['id']}: {r['count']:.2f}")
    return 0


def _cmd_params(args, config: dict) -> int:
    channels = args.channels if args.channels is not None else config.get("channels", 16)
    resolved = {"channels": channels}
    _announce(resolved, args.json)
    rows = []
    for arch in ARCHITECTURES:
        model = build(ModelSpec(arch=arch, channels=channels), seed=0)
        conv = model.count_parameters("conv_weights")
        learnable = model.count_parameters("all_learnable")
        rows.append({"arch": arch, "conv_weights": conv,
                     "all_learnable": learnable,
                     "conv_weights_millions": round(conv / 1e6, 3)})
    if args.json:
        print(json.dumps({"architectures": rows}, indent=2))
    else:
        print(f"{'ARCH':<12} {'CONV WEIGHTS':>14} {'ALL LEARNABLE':>14} {'PARAMS (M)':>11}")
        for r in rows:
            print(f"{r['arch']:<12} {r['conv_weights']:>14,} {r['all_learnable']:>14,}"
                  f" {r['conv_weights_millions']:>11.3f}")
    return 0


def _cmd_kfold(args, config: dict) -> int:
    resolved = {"k": args.k, "fold": args.fold, "seed": args.seed}
    _announce(resolved, args.json)
    manifest = _load_manifest(args.manifest)
    ids = [img for img, _ in manifest.entries]
    try:
        train_ids, test_ids = kfold(ids, args.k, args.fold, args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from e

    out_dir = Path(args.out) if args.out else Path(args.manifest).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    by_id = dict(manifest.entries)

    def rewrite(img_ids: list[str]) -> list[tuple[str, str]]:
        rows = []
        for img in img_ids:
            img_abs = (manifest.root / img).resolve()
            ann_abs = (manifest.root / by_id[img]).resolve()
            rows.append((_relative_to(img_abs, out_dir), _relative_to(ann_abs, out_dir)))
        return rows

    train_path = out_dir / f"fold{args.fold}_train.csv"
    test_path = out_dir / f"fold{args.fold}_test.csv"
    DatasetManifest(root=out_dir, entries=rewrite(train_ids), split="train").write(train_path)
    DatasetManifest(root=out_dir, entries=rewrite(test_ids), split="test").write(test_path)
    _write_provenance(out_dir, args, resolved)
    if args.json:
        print(json.dumps({"train": train_ids, "test": test_ids,
                          "train_manifest": str(train_path),
                          "test_manifest": str(test_path)}, indent=2))
    else:
        print(f"fold {args.fold}/{args.k}: {len(train_ids)} train, {len(test_ids)} test")
        print(f"wrote {train_path} and {test_path}")
    return 0


def _relative_to(path: Path, base: Path) -> str:
    import os

    return os.path.relpath(path, base.resolve())


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crowdcount",
        description="Crowd counting: density-map ground truth, recursive "
                    "residual regressors, SGD training and MAE/MSE evaluation.")
    parser.add_argument("--version", action="version", version=f"crowdcount {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seed", type=int, default=0, help="global RNG seed")
        p.add_argument("--deterministic", action="store_true",
                       help="force sequential execution everywhere")
        p.add_argument("--config", help="JSON file overriding defaults")
        p.add_argument("--json", action="store_true", help="machine-readable stdout")

    p = sub.add_parser("density", help="generate ground-truth density maps")
    p.add_argument("--annotations", nargs="+", help="annotation JSON files")
    p.add_argument("--manifest", help="dataset manifest CSV")
    _add_kernel_flags(p)
    p.add_argument("--downsample", type=int, default=1, help="sum-pool factor")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--preview", action="store_true", help="also write grayscale PNGs")
    common(p)
    p.set_defaults(func=_cmd_density)

    p = sub.add_parser("synth", help="generate a synthetic disc dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--train-count", type=int)
    p.add_argument("--test-count", type=int)
    p.add_argument("--size", help="image size WxH (default 64x64)")
    p.add_argument("--heads-min", type=int)
    p.add_argument("--heads-max", type=int)
    p.add_argument("--blob-radius", type=float)
    p.add_argument("--noise-level", type=float)
    common(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a model on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--arch", choices=list(ARCHITECTURES))
    p.add_argument("--channels", type=int)
    p.add_argument("--recursion-depth", type=int)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--crop", help="training crop HxW (default 64x64)")
    p.add_argument("--flip-probability", type=float)
    p.add_argument("--lr-decay-every", type=int)
    p.add_argument("--lr-decay-factor", type=float)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--log-every", type=int, default=0)
    _add_kernel_flags(p)
    common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="metrics JSON path")
    p.add_argument("--workers", type=int, default=1)
    common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("count", help="predict per-image counts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", nargs="+", help="image files")
    p.add_argument("--manifest", help="dataset manifest CSV")
    common(p)
    p.set_defaults(func=_cmd_count)

    p = sub.add_parser("params", help="parameter counts for all architectures")
    p.add_argument("--channels", type=int)
    common(p)
    p.set_defaults(func=_cmd_params)

    p = sub.add_parser("kfold", help="split a manifest into one fold's train/test")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out", help="output directory (default: manifest directory)")
    common(p)
    p.set_defaults(func=_cmd_kfold)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = _build_parser()
    args = parser.parse_args(argv)
    args.raw_argv = argv
    try:
        config = _load_config_file(args.config)
        return args.func(args, config)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 -- runtime failures map to exit 1
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
