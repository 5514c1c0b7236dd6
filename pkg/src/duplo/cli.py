"""Command-line surface for the full pipeline: synthetic data, preprocessing,
splits, training, evaluation, prediction, feature export, ablation, and
gradient checking.

Exit codes: 0 success, 1 internal/numeric failure, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data as D
from . import features as F
from . import metrics as M
from . import ppm
from . import tensor as T
from .gradcheck import full_model_gradcheck
from .model import DuploModel, VARIANTS, load_checkpoint, save_checkpoint
from .rng import SeededRng
from .training import (TrainConfig, TrainingError, ablate, best_epoch,
                       build_model, evaluate, format_ablation_table, train)

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _read_cube(path: str) -> D.SitsCube:
    if not os.path.exists(path):
        raise CliError(f"cannot open {path!r}: no such file")
    return D.read_cube(path)


def _read_labels(path: str) -> D.LabelRaster:
    if not os.path.exists(path):
        raise CliError(f"cannot open {path!r}: no such file")
    return D.read_labels(path)


def _prepare_cube(cube: D.SitsCube, stats: D.NormalizationStats | None = None):
    """Training-time preprocessing: gapfill, NDVI, min-max normalization."""
    return D.preprocess(cube, gapfill=True, ndvi=True, normalize=True, stats=stats)


def _stats_from_meta(meta: dict) -> D.NormalizationStats:
    return D.NormalizationStats(np.array(meta["norm_min"], dtype=np.float32),
                                np.array(meta["norm_max"], dtype=np.float32))


def _dataset_for_model(cube: D.SitsCube, labels: D.LabelRaster, meta: dict,
                       model: DuploModel):
    cube, _ = _prepare_cube(cube, _stats_from_meta(meta))
    cfg = model.config
    if len(cube.bands) != cfg.num_bands or cube.data.shape[0] != cfg.num_timestamps:
        raise CliError(f"cube has B={len(cube.bands)}, T={cube.data.shape[0]} but "
                       f"checkpoint expects B={cfg.num_bands}, T={cfg.num_timestamps}")
    return cube, D.extract_patches(cube, labels)


# -- commands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = D.SyntheticSpec(num_classes=args.classes, height=args.height,
                           width=args.width, num_timestamps=args.timestamps,
                           objects_per_class=args.objects_per_class,
                           object_size=args.object_size,
                           noise_sigma=args.noise, cloud_prob=args.cloud_prob,
                           seed=args.seed)
    cube, labels = D.generate_synthetic(spec)
    D.write_cube(args.out_cube, cube)
    D.write_labels(args.out_labels, labels)
    n_labeled = int((labels.labels > 0).sum())
    print(f"synth: {spec.height}x{spec.width} grid, T={spec.num_timestamps}, "
          f"{spec.num_classes} classes, {n_labeled} labeled pixels")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cube = _read_cube(args.input)
    if args.gapfill:
        cube = D.gapfill_linear(cube)
    if args.ndvi:
        cube = D.compute_ndvi(cube)
    if args.normalize:
        cube = D.normalize_minmax(cube, D.NormalizationStats.from_cube(cube))
    D.write_cube(args.output, cube)
    for b, name in enumerate(cube.bands):
        band = cube.data[:, b]
        print(f"band {name}: min={band.min():.6f} max={band.max():.6f} mean={band.mean():.6f}")
    return EXIT_OK


def cmd_split(args) -> int:
    labels = _read_labels(args.labels)
    fractions = (args.train, args.val, round(1.0 - args.train - args.val, 10))
    assignment = D.object_split(labels, fractions, args.seed)
    D.write_split(args.out, assignment)
    counts = {name: len(assignment.part(name)) for name in D.SPLIT_NAMES}
    print(f"split: {counts['train']} train / {counts['val']} val / {counts['test']} test objects")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    if args.small:
        cfg = TrainConfig.small(seed=args.seed, variant=args.variant)
    else:
        cfg = TrainConfig(seed=args.seed, variant=args.variant)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.batch is not None:
        cfg.batch_size = args.batch
    if args.lr is not None:
        cfg.learning_rate = args.lr
    if args.alpha1 is not None:
        cfg.alpha1 = args.alpha1
    if args.alpha2 is not None:
        cfg.alpha2 = args.alpha2
    return cfg


def _load_training_data(args):
    cube = _read_cube(args.cube)
    labels = _read_labels(args.labels)
    if not os.path.exists(args.split):
        raise CliError(f"cannot open {args.split!r}: no such file")
    assignment = D.read_split(args.split)
    cube, stats = _prepare_cube(cube)
    samples = D.extract_patches(cube, labels)
    parts = D.split_samples(samples, assignment)
    return cube, labels, stats, parts


def cmd_train(args) -> int:
    cfg = _train_config(args)
    print(f"train: lr={cfg.learning_rate:g}, epochs={cfg.epochs}, "
          f"batch={cfg.batch_size}, alpha1={cfg.alpha1:g}, alpha2={cfg.alpha2:g}, "
          f"variant={cfg.variant}, seed={cfg.seed}")
    cube, labels, stats, parts = _load_training_data(args)
    c = labels.num_classes()
    t_len, b_len = cube.data.shape[0], len(cube.bands)
    rng = SeededRng(cfg.seed)
    model = build_model(cfg, c, t_len, b_len, rng)

    def progress(rec):
        print(f"epoch {rec.epoch}: train_loss={rec.train_loss:.4f} "
              f"val_accuracy={rec.val_accuracy:.4f}")

    model, history = train(model, parts, cfg, rng=rng,
                           progress=progress if args.verbose else None)
    best = best_epoch(history)
    meta = {
        "norm_min": [float(v) for v in stats.band_min],
        "norm_max": [float(v) for v in stats.band_max],
        "best_epoch": best.epoch,
        "val_accuracy": best.val_accuracy,
        "config": {"epochs": cfg.epochs, "batch_size": cfg.batch_size,
                   "learning_rate": cfg.learning_rate, "alpha1": cfg.alpha1,
                   "alpha2": cfg.alpha2, "seed": cfg.seed, "variant": cfg.variant},
    }
    save_checkpoint(args.out, model, meta)
    history_path = args.history or args.out + ".history.csv"
    with open(history_path, "w") as fh:
        fh.write("epoch,train_loss,val_accuracy\n")
        for rec in history:
            fh.write(f"{rec.epoch},{rec.train_loss:.6f},{rec.val_accuracy:.6f}\n")
    print(f"best epoch {best.epoch}: val_accuracy={best.val_accuracy:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, meta = load_checkpoint(args.model)
    labels = _read_labels(args.labels)
    if labels.num_classes() != model.config.num_classes:
        raise CliError(f"label raster has {labels.num_classes()} classes but "
                       f"checkpoint expects {model.config.num_classes}")
    cube = _read_cube(args.cube)
    _, samples = _dataset_for_model(cube, labels, meta, model)
    assignment = D.read_split(args.split)
    part = [s for s in samples if assignment.mapping.get(s.object_id) == args.part]
    if not part:
        raise CliError(f"split part {args.part!r} is empty")
    report = evaluate(model, part)
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "metrics.txt"), "w") as fh:
        fh.write(M.format_report(report))
    with open(os.path.join(args.out_dir, "confusion.csv"), "w") as fh:
        fh.write(M.confusion_csv(report.confusion))
    ppm.write_heatmap(os.path.join(args.out_dir, "confusion.ppm"), report.confusion)
    print(M.format_report(report), end="")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, meta = load_checkpoint(args.model)
    cube = _read_cube(args.cube)
    cube, _ = _prepare_cube(cube, _stats_from_meta(meta))
    cfg = model.config
    if len(cube.bands) != cfg.num_bands or cube.data.shape[0] != cfg.num_timestamps:
        raise CliError(f"cube has B={len(cube.bands)}, T={cube.data.shape[0]} but "
                       f"checkpoint expects B={cfg.num_bands}, T={cfg.num_timestamps}")
    t_len, b_len, h, w = cube.data.shape
    class_map = np.zeros((h, w), dtype=np.int32)
    batch, coords = [], []

    def flush():
        if not batch:
            return
        preds = model.predict(np.stack(batch))
        for (r, c), p in zip(coords, preds):
            class_map[r, c] = int(p) + 1
        batch.clear()
        coords.clear()

    for r in range(h):
        for c in range(w):
            batch.append(D.extract_patch(cube.data, r, c))
            coords.append((r, c))
            if len(batch) >= 256:
                flush()
    flush()
    np.asarray(class_map, dtype="<i4").tofile(args.out)
    if args.ppm:
        ppm.write_classmap(args.ppm, class_map)
    print(f"predict: wrote {h}x{w} class map to {args.out}")
    return EXIT_OK


def cmd_features(args) -> int:
    model, meta = load_checkpoint(args.model)
    labels = _read_labels(args.labels)
    cube = _read_cube(args.cube)
    _, samples = _dataset_for_model(cube, labels, meta, model)
    records = []
    for i in range(0, len(samples), 256):
        chunk = samples[i:i + 256]
        feats = model.extract_features(np.stack([s.cube for s in chunk]))
        for s, vec in zip(chunk, feats):
            records.append((s.object_id, s.label + 1, vec))
    if args.format == "csv":
        F.write_features_csv(args.out, records)
    else:
        F.write_features_bin(args.out, records)
    print(f"features: wrote {len(records)} records of width {2 + len(records[0][2])}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _train_config(args)
    cube, labels, _stats, parts = _load_training_data(args)
    results = ablate(parts, cfg, labels.num_classes(),
                     cube.data.shape[0], len(cube.bands))
    table = format_ablation_table(results)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table)
    print(table, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    errors = full_model_gradcheck()
    worst = max(errors.values())
    for name in sorted(errors):
        print(f"{name}: {errors[name]:.3e}")
    print(f"max relative error: {worst:.3e} (tolerance {args.tol:g})")
    return EXIT_OK if worst < args.tol else EXIT_INTERNAL


# -- argument parsing ---------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="duplo",
                                description="Dual-branch CNN/GRU-attention SITS classifier")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic benchmark")
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--timestamps", type=int, default=8)
    s.add_argument("--objects-per-class", type=int, default=10)
    s.add_argument("--object-size", type=int, default=5)
    s.add_argument("--noise", type=float, default=0.02)
    s.add_argument("--cloud-prob", type=float, default=0.1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-cube", required=True)
    s.add_argument("--out-labels", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="gapfill / NDVI / normalize a cube")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--gapfill", action="store_true")
    s.add_argument("--ndvi", action="store_true")
    s.add_argument("--normalize", action="store_true")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("split", help="object-exclusive train/val/test split")
    s.add_argument("--labels", required=True)
    s.add_argument("--train", type=float, default=0.30)
    s.add_argument("--val", type=float, default=0.20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_split)

    def add_train_args(s):
        s.add_argument("--cube", required=True)
        s.add_argument("--labels", required=True)
        s.add_argument("--split", required=True)
        s.add_argument("--variant", choices=VARIANTS, default="full")
        s.add_argument("--epochs", type=int, default=None)
        s.add_argument("--batch", type=int, default=None)
        s.add_argument("--lr", type=float, default=None)
        s.add_argument("--alpha1", type=float, default=None)
        s.add_argument("--alpha2", type=float, default=None)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--small", action="store_true",
                       help="desk-scale profile (narrow model, 30 epochs)")

    s = sub.add_parser("train", help="train a model and write a checkpoint")
    add_train_args(s)
    s.add_argument("--out", required=True)
    s.add_argument("--history", default=None)
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="metrics on one split part")
    s.add_argument("--model", required=True)
    s.add_argument("--cube", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--part", choices=D.SPLIT_NAMES, default="test")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("predict", help="full-raster class map")
    s.add_argument("--model", required=True)
    s.add_argument("--cube", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ppm", default=None, help="also write a color map image")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("features", help="export fused descriptors per labeled pixel")
    s.add_argument("--model", required=True)
    s.add_argument("--cube", required=True)
    s.add_argument("--labels", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("csv", "bin"), default="csv")
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("ablate", help="train all four variants, emit metric table")
    add_train_args(s)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference check of the tiny model")
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = os.environ.get("DUPLO_THREADS", "0")
    if threads not in ("", "0", "1"):
        # Kernel parallelism is not implemented; anything else runs single-threaded.
        print(f"note: DUPLO_THREADS={threads} requested, running single-threaded",
              file=sys.stderr)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (D.FormatError, D.DataError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, T.NumericsError, T.ContractError, T.ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
