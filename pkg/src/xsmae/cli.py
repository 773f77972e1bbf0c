"""Command-line interface: dataset generation, pretraining, KNN evaluation, ablations.

Every command is deterministic given its input files and seed; ``--seed``
overrides the seed found in the config (or grid) file. Exit codes: 0 on
success, 1 when a run fails at runtime (e.g. divergence), 2 for usage
errors such as missing files or malformed configs.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

from .augment import SyntheticDatasetSpec, generate_synthetic_dataset
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, parse_config
from .errors import ConfigError, XsmaeError
from .evaluate import (DEFAULT_K, SWEEP_RATIOS, parse_ablation_grid,
                       run_ablation, scale_sweep, stratified_split,
                       write_ablation_csv, write_sweep_csv)
from .rng import RngPool
from .tensorio import read_tile_dataset, write_tile_dataset
from .train import pretrain, total_step_budget
from .vit import init_params

__all__ = ["main", "parse_dataset_spec"]

STEP_LOG_FIELDS = ("step", "lr", "l_cc", "l_cp", "l_re", "total")


class UsageError(Exception):
    """Bad invocation: missing files, malformed inputs. Exits with code 2."""


def parse_dataset_spec(text: str) -> SyntheticDatasetSpec:
    """Parse flat key=value text into a SyntheticDatasetSpec; typos are errors."""
    field_types = {f.name: f.type for f in fields(SyntheticDatasetSpec)}
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in field_types:
            raise ConfigError(f"line {lineno}: unknown dataset key {key!r}")
        if key in overrides:
            raise ConfigError(f"line {lineno}: duplicate dataset key {key!r}")
        caster = {"int": int, "float": float}[field_types[key]]
        try:
            overrides[key] = caster(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: cannot read {value!r} as {field_types[key]}") from exc
    return SyntheticDatasetSpec(**overrides)


def _read_text(path: str, what: str) -> str:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p.read_text()


def _load_dataset(path: str):
    if not Path(path).is_dir():
        raise UsageError(f"dataset directory not found: {path}")
    return read_tile_dataset(path)


def _check_gsd(config_gsd: float, dataset_gsd: float) -> None:
    if config_gsd != dataset_gsd:
        raise UsageError(
            f"config base_gsd {config_gsd} does not match the dataset's {dataset_gsd}; "
            f"set base_gsd in the config to the dataset value")


def _write_step_log(path: str, rows: list[dict]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(STEP_LOG_FIELDS)
        for row in rows:
            writer.writerow(["" if row[key] is None else repr(row[key])
                             if isinstance(row[key], float) else row[key]
                             for key in STEP_LOG_FIELDS])


def _cmd_gen_data(args) -> int:
    spec = parse_dataset_spec(_read_text(args.spec, "dataset spec"))
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    images, labels = generate_synthetic_dataset(spec)
    write_tile_dataset(args.out, images, labels, base_gsd=args.base_gsd)
    print(f"wrote {len(labels)} images "
          f"({spec.image_size}x{spec.image_size}x{spec.channels}, "
          f"{spec.num_classes} classes) to {args.out}")
    return 0


def _cmd_pretrain(args) -> int:
    config = parse_config(_read_text(args.config, "config file"))
    if args.seed is not None:
        config = config.with_overrides(seed=args.seed)
    images, _, dataset_gsd = _load_dataset(args.data)
    _check_gsd(config.base_gsd, dataset_gsd)

    total = total_step_budget(config, images.shape[0])
    if args.dry_run:
        params = init_params(config.encoder_config(), config.decoder_config(),
                             config.proj_dim, RngPool(config.seed).stream("init"))
        per_epoch = images.shape[0] // config.batch_size
        print(f"parameters: {params.count()}")
        print(f"plan: {total} steps ({per_epoch} per epoch over {images.shape[0]} images), "
              f"batch {config.batch_size}, base lr {config.base_lr}")
        return 0

    ckpt, rows = pretrain(config, images)
    save_checkpoint(args.out, ckpt)
    log_path = args.log if args.log is not None else args.out + ".log.csv"
    _write_step_log(log_path, rows)
    last = rows[-1] if rows else {}
    print(f"trained {total} steps; final total loss "
          f"{last.get('total', float('nan')):.4f}; checkpoint {args.out}; log {log_path}")
    return 0


def _cmd_eval_knn(args) -> int:
    if not Path(args.ckpt).is_file():
        raise UsageError(f"checkpoint not found: {args.ckpt}")
    ckpt = load_checkpoint(args.ckpt)
    config = ckpt.config
    if args.seed is not None:
        config = config.with_overrides(seed=args.seed)
    images, labels, dataset_gsd = _load_dataset(args.data)
    _check_gsd(config.base_gsd, dataset_gsd)
    try:
        ratios = tuple(float(tok) for tok in args.ratios.split(",") if tok.strip())
    except ValueError as exc:
        raise UsageError(f"cannot parse --ratios {args.ratios!r}") from exc

    train_idx, test_idx = stratified_split(labels, seed=config.seed)
    rows = scale_sweep(ckpt.params, config,
                       images[train_idx], labels[train_idx],
                       images[test_idx], labels[test_idx],
                       ratios=ratios, k=args.k)
    for row in rows:
        print(f"ratio {row['ratio']:g}: accuracy {row['accuracy']:.4f} (k={row['k']})")
    write_sweep_csv(args.out, rows)
    print(f"wrote {args.out}")
    return 0


def _max_workers(requested: int) -> int:
    cap = os.environ.get("XSMAE_THREADS")
    if cap is None:
        return requested
    try:
        cap_value = int(cap)
    except ValueError as exc:
        raise UsageError(f"XSMAE_THREADS must be an integer, got {cap!r}") from exc
    if cap_value < 1:
        raise UsageError(f"XSMAE_THREADS must be positive, got {cap_value}")
    return min(requested, cap_value)


def _cmd_ablate(args) -> int:
    grid = parse_ablation_grid(_read_text(args.grid, "grid file"))
    if args.seed is not None:
        grid = replace(grid, seeds=(args.seed,))
    images, labels, dataset_gsd = _load_dataset(args.data)
    _check_gsd(grid.base.base_gsd, dataset_gsd)

    report = run_ablation(grid, images, labels,
                          workers=_max_workers(args.workers),
                          out_dir=args.out, resume=args.resume)
    out_csv = os.path.join(args.out, "ablation.csv")
    write_ablation_csv(out_csv, report)
    cells = len(grid.cells) * len(grid.seeds)
    print(f"ran {cells} cell trainings, {len(report.rows)} report rows; wrote {out_csv}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xsmae",
        description="Cross-scale masked-autoencoder pretraining on tile datasets.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic tile dataset")
    p.add_argument("--spec", required=True, help="dataset spec file (key = value)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--base-gsd", type=float, default=1.0,
                   help="ground-sample distance recorded in the manifest")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("pretrain", help="run self-supervised pretraining")
    p.add_argument("--config", required=True, help="training config file")
    p.add_argument("--data", required=True, help="tile dataset directory")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", default=None,
                   help="step-log CSV path (default: <out>.log.csv)")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--dry-run", action="store_true",
                   help="print parameter count and step plan, then exit")
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("eval-knn", help="frozen-encoder KNN over scale ratios")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="tile dataset directory")
    p.add_argument("--ratios", default=",".join(str(r) for r in SWEEP_RATIOS),
                   help="comma-separated evaluation scale ratios")
    p.add_argument("--k", type=int, default=DEFAULT_K, help="neighbors per vote")
    p.add_argument("--out", default="eval-knn.csv", help="accuracy CSV path")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed (controls the eval split)")
    p.set_defaults(func=_cmd_eval_knn)

    p = sub.add_parser("ablate", help="train and evaluate a grid of flag ablations")
    p.add_argument("--grid", required=True, help="ablation grid file")
    p.add_argument("--data", required=True, help="tile dataset directory")
    p.add_argument("--out", required=True, help="output directory for checkpoints and CSV")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel cell trainings (capped by XSMAE_THREADS)")
    p.add_argument("--resume", action="store_true",
                   help="reuse checkpoints already present in --out")
    p.add_argument("--seed", type=int, default=None,
                   help="replace the grid's seed list with this single seed")
    p.set_defaults(func=_cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse prints its own message; keep its code
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except XsmaeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
