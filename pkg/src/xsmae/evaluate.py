"""Frozen-encoder evaluation: feature tables, cosine KNN, scale sweeps, ablations.

The encoder is used as a fixed representation generator: images are rescaled
by an evaluation ratio (simulating coarser capture), encoded with masking
disabled, pooled, and classified with a k-nearest-neighbor vote in cosine
similarity. The ablation runner retrains the model under flag deltas on
identical data streams and reports accuracy per (cell, ratio, seed).
"""

from __future__ import annotations

import csv
import os
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .augment import scale_augment
from .checkpoint import load_checkpoint, save_checkpoint
from .config import TrainConfig, config_hash, config_to_text, parse_config
from .errors import (ConfigError, ConsistencyError, DegenerateInputError,
                     ShapeError)
from .losses import pool_encoder_tokens
from .rng import derive_generator
from .tensor import Tensor
from .train import pretrain, standardize_views
from .vit import MaskSpec, encode

DEFAULT_K = 20
DEFAULT_TEST_FRACTION = 0.2
SWEEP_RATIOS = (0.125, 0.25, 0.5, 1.0)

# The only config fields an ablation cell may change: the loss/augmentation
# toggles that form the report's flag columns. Restricting deltas to these
# keeps every cell comparable to the baseline (same budget, same geometry).
ABLATION_FLAGS = ("multi_scale", "cross_consis", "cross_pred",
                  "negatives_encoder", "negatives_decoder", "gsd_positional")

# Accuracies reported for the full-scale runs this benchmark miniaturizes
# (45-class aerial-scene evaluation after 300-epoch pretraining on 363.6k
# images). Desk-scale runs cannot reproduce these numbers; they are attached
# to reports as context and are never asserted against.
REFERENCE_RESULTS = (
    {"experiment": "loss_flags", "multi_scale": False, "cross_consis": False,
     "cross_pred": False, "knn_at_half": 52.1, "knn_at_full": 58.9,
     "reproducible": False},
    {"experiment": "loss_flags", "multi_scale": True, "cross_consis": False,
     "cross_pred": False, "knn_at_half": 68.3, "knn_at_full": 69.2,
     "reproducible": False},
    {"experiment": "loss_flags", "multi_scale": True, "cross_consis": True,
     "cross_pred": False, "knn_at_half": 72.4, "knn_at_full": 74.4,
     "reproducible": False},
    {"experiment": "loss_flags", "multi_scale": True, "cross_consis": False,
     "cross_pred": True, "knn_at_half": 74.9, "knn_at_full": 76.5,
     "reproducible": False},
    {"experiment": "loss_flags", "multi_scale": True, "cross_consis": True,
     "cross_pred": True, "knn_at_half": 78.7, "knn_at_full": 79.3,
     "reproducible": False},
    {"experiment": "negatives", "negatives_encoder": False,
     "negatives_decoder": False, "knn_at_half": 75.9, "knn_at_full": 77.9,
     "reproducible": False},
    {"experiment": "negatives", "negatives_encoder": True,
     "negatives_decoder": True, "knn_at_half": 76.8, "knn_at_full": 77.7,
     "reproducible": False},
    {"experiment": "negatives", "negatives_encoder": False,
     "negatives_decoder": True, "knn_at_half": 75.1, "knn_at_full": 77.1,
     "reproducible": False},
    {"experiment": "negatives", "negatives_encoder": True,
     "negatives_decoder": False, "knn_at_half": 78.7, "knn_at_full": 79.3,
     "reproducible": False},
    {"experiment": "gsd_positional", "gsd_positional": True,
     "note": "reduced accuracy at every ratio relative to the default "
             "in the full-scale runs", "reproducible": False},
)


@dataclass(frozen=True)
class FeatureTable:
    """Pooled encoder features with labels, keyed to the config that made them."""

    features: np.ndarray          # [M, D] float
    labels: np.ndarray            # [M] int
    config_digest: bytes          # sha256 of the producing config text
    scale_ratio: float

    def __post_init__(self):
        feats = np.asarray(self.features)
        labs = np.asarray(self.labels)
        if feats.ndim != 2:
            raise ShapeError(f"features must be [M, D], got shape {feats.shape}")
        if labs.ndim != 1 or len(labs) != feats.shape[0]:
            raise ShapeError(
                f"labels must be [M={feats.shape[0]}], got shape {labs.shape}")
        if not np.all(np.isfinite(feats)):
            raise DegenerateInputError("features contain non-finite entries")
        norms = np.linalg.norm(feats, axis=1)
        if feats.shape[0] and norms.min() == 0.0:
            raise DegenerateInputError("feature rows must have nonzero norm")
        if len(labs) and labs.min() < 0:
            raise ConsistencyError("labels must be nonnegative class indices")

    def __len__(self) -> int:
        return self.features.shape[0]


def _full_visibility(num_patches: int) -> MaskSpec:
    return MaskSpec(visible_idx=np.arange(num_patches),
                    masked_idx=np.arange(0), mask_ratio=0.0)


def extract_features(params, config: TrainConfig, images: np.ndarray,
                     scale_ratio: float, *, labels: np.ndarray | None = None,
                     batch_size: int = 64) -> FeatureTable:
    """Encode rescaled images with masking off; pool to one row per image.

    Rescaling uses the same crop/resample pipeline as training augmentation,
    in deterministic center-crop mode, so a ratio below 1 simulates the same
    coarser capture the model saw during pretraining. No randomness and no
    cross-image operations: each row depends only on its own image. Labels
    default to zeros when the table is only used as a feature matrix.
    """
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ShapeError(f"need at least one [N, H, W, C] image, got shape {images.shape}")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be positive, got {batch_size}")
    enc_cfg = config.encoder_config()
    dtype = np.float32 if config.precision == "float32" else np.float64
    views = standardize_views(np.stack([
        scale_augment(img, scale_ratio, config.image_size, center_crop=True)
        for img in images
    ]), config).astype(dtype)
    spec = _full_visibility(enc_cfg.num_patches)
    gsd = config.base_gsd / scale_ratio if config.gsd_positional else None
    rows = []
    for lo in range(0, len(views), batch_size):
        f_e = encode(Tensor(views[lo:lo + batch_size]), params, enc_cfg, spec, gsd=gsd)
        pooled = pool_encoder_tokens(f_e, enc_cfg.use_cls_token, config.pooling)
        rows.append(pooled.data.astype(np.float64))
    labs = (np.zeros(len(images), dtype=np.int64) if labels is None
            else np.asarray(labels, dtype=np.int64))
    return FeatureTable(features=np.concatenate(rows), labels=labs,
                        config_digest=config_hash(config),
                        scale_ratio=float(scale_ratio))


def _vote(labels: np.ndarray, sims: np.ndarray) -> int:
    """Majority over the k neighbors; ties by summed similarity, then lowest class."""
    counts: dict[int, int] = {}
    sums: dict[int, float] = {}
    for lab, s in zip(labels.tolist(), sims.tolist()):
        counts[lab] = counts.get(lab, 0) + 1
        sums[lab] = sums.get(lab, 0.0) + s
    return min(counts, key=lambda lab: (-counts[lab], -sums[lab], lab))


def knn_classify(train: FeatureTable, test: FeatureTable, k: int = DEFAULT_K) -> float:
    """Cosine k-nearest-neighbor accuracy of test against train."""
    if k < 1:
        raise ConfigError(f"k must be at least 1, got {k}")
    if len(train) == 0:
        raise ConfigError("train table is empty")
    if k > len(train):
        raise ConfigError(f"k={k} exceeds the {len(train)} train rows")
    if train.features.shape[1] != test.features.shape[1]:
        raise ShapeError("train and test feature widths differ")
    if train.config_digest != test.config_digest:
        raise ConsistencyError("train and test tables come from different configs")
    a = test.features / np.linalg.norm(test.features, axis=1, keepdims=True)
    b = train.features / np.linalg.norm(train.features, axis=1, keepdims=True)
    sims = a @ b.T
    # Stable sort on the negated similarities: equal scores keep train order,
    # making the selected neighborhood deterministic.
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    neigh_labels = np.take_along_axis(np.broadcast_to(train.labels, sims.shape),
                                      order, axis=1)
    neigh_sims = np.take_along_axis(sims, order, axis=1)
    correct = sum(
        int(_vote(neigh_labels[i], neigh_sims[i]) == test.labels[i])
        for i in range(len(test))
    )
    return correct / len(test)


def stratified_split(labels: np.ndarray, test_fraction: float = DEFAULT_TEST_FRACTION,
                     seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded per-class split; returns sorted (train_idx, test_idx)."""
    labels = np.asarray(labels)
    if labels.ndim != 1 or len(labels) == 0:
        raise ShapeError(f"labels must be a nonempty 1-D array, got shape {labels.shape}")
    if not (0.0 < test_fraction < 1.0):
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}")
    rng = derive_generator(seed, "eval.split")
    train_parts, test_parts = [], []
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        perm = idx[rng.permutation(len(idx))]
        n_test = int(round(test_fraction * len(idx)))
        if len(idx) >= 2:
            n_test = min(max(n_test, 1), len(idx) - 1)
        test_parts.append(perm[:n_test])
        train_parts.append(perm[n_test:])
    return (np.sort(np.concatenate(train_parts)),
            np.sort(np.concatenate(test_parts)))


def scale_sweep(params, config: TrainConfig,
                train_images: np.ndarray, train_labels: np.ndarray,
                test_images: np.ndarray, test_labels: np.ndarray,
                ratios=SWEEP_RATIOS, k: int = DEFAULT_K,
                batch_size: int = 64) -> list[dict]:
    """KNN accuracy at each evaluation ratio; one row dict per ratio."""
    if len(ratios) == 0:
        raise ConfigError("ratios must be nonempty")
    rows = []
    for ratio in ratios:
        tr = extract_features(params, config, train_images, ratio,
                              labels=train_labels, batch_size=batch_size)
        te = extract_features(params, config, test_images, ratio,
                              labels=test_labels, batch_size=batch_size)
        rows.append({"ratio": float(ratio), "k": k,
                     "accuracy": knn_classify(tr, te, k=k)})
    return rows


def split_and_sweep(params, config: TrainConfig, images: np.ndarray,
                    labels: np.ndarray, *, split_seed: int,
                    ratios=SWEEP_RATIOS, k: int = DEFAULT_K,
                    batch_size: int = 64) -> list[dict]:
    """Stratified 80/20 split of a labeled set, then a scale sweep on it."""
    tr_idx, te_idx = stratified_split(labels, DEFAULT_TEST_FRACTION, seed=split_seed)
    return scale_sweep(params, config, images[tr_idx], labels[tr_idx],
                       images[te_idx], labels[te_idx],
                       ratios=ratios, k=k, batch_size=batch_size)


_CELL_NAME = re.compile(r"^[A-Za-z0-9_.-]+$")


@dataclass(frozen=True)
class AblationCell:
    """A named set of flag overrides applied on top of the grid's base config."""

    name: str
    deltas: tuple[tuple[str, bool], ...] = ()

    def __post_init__(self):
        if not _CELL_NAME.match(self.name):
            raise ConfigError(f"cell name {self.name!r} must match {_CELL_NAME.pattern}")
        for key, value in self.deltas:
            if key not in ABLATION_FLAGS:
                raise ConfigError(
                    f"cell {self.name!r} may only change {ABLATION_FLAGS}, got {key!r}")
            if not isinstance(value, bool):
                raise ConfigError(f"cell {self.name!r}: {key} must be a bool")

    def config(self, base: TrainConfig, seed: int) -> TrainConfig:
        return base.with_overrides(seed=seed, **dict(self.deltas))


@dataclass(frozen=True)
class AblationGrid:
    """Cells to retrain, the ratios/seeds to evaluate, and the shared base config.

    Cells differ from the base only in the declared flag columns, so every
    row of the report is comparable: same budget, same geometry, and — because
    randomness is drawn by named stream regardless of which losses are on —
    identical crops, scales, and masks for a given seed.
    """

    base: TrainConfig
    cells: tuple[AblationCell, ...]
    ratios: tuple[float, ...] = SWEEP_RATIOS
    seeds: tuple[int, ...] = (0,)
    k: int = DEFAULT_K

    def __post_init__(self):
        if not self.cells:
            raise ConfigError("ablation grid has no cells")
        names = [c.name for c in self.cells]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate cell names: {names}")
        if not self.seeds:
            raise ConfigError("ablation grid needs at least one seed")
        if not self.ratios:
            raise ConfigError("ablation grid needs at least one ratio")
        for r in self.ratios:
            if not (0.0 < r <= 1.0):
                raise ConfigError(f"ratio {r} outside (0, 1]")
        if self.k < 1:
            raise ConfigError(f"k must be at least 1, got {self.k}")


def parse_ablation_grid(text: str, base: TrainConfig | None = None) -> AblationGrid:
    """Parse a flat key=value grid file.

    Recognized keys: ``ratios`` and ``seeds`` (comma lists), ``k``,
    ``base.<field>`` (config override), and ``cell.<name>`` whose value is a
    space-separated list of flag=true/false pairs (empty for the unmodified
    base). Unknown keys are hard errors.
    """
    ratios: tuple[float, ...] = SWEEP_RATIOS
    seeds: tuple[int, ...] = (0,)
    k = DEFAULT_K
    base_overrides: list[str] = []
    cells: list[AblationCell] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"grid line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key == "ratios":
            ratios = tuple(float(tok) for tok in value.split(",") if tok.strip())
        elif key == "seeds":
            seeds = tuple(int(tok) for tok in value.split(",") if tok.strip())
        elif key == "k":
            k = int(value)
        elif key.startswith("base."):
            base_overrides.append(f"{key[len('base.'):]} = {value}")
        elif key.startswith("cell."):
            deltas = []
            for token in value.split():
                if "=" not in token:
                    raise ConfigError(
                        f"grid line {lineno}: cell entries are flag=true/false, got {token!r}")
                flag, flag_value = token.split("=", 1)
                if flag_value not in ("true", "false"):
                    raise ConfigError(
                        f"grid line {lineno}: {flag} must be true or false, got {flag_value!r}")
                deltas.append((flag, flag_value == "true"))
            cells.append(AblationCell(name=key[len("cell."):], deltas=tuple(deltas)))
        else:
            raise ConfigError(f"grid line {lineno}: unknown key {key!r}")
    resolved_base = parse_config("\n".join(base_overrides),
                                 base=base if base is not None else TrainConfig())
    return AblationGrid(base=resolved_base, cells=tuple(cells),
                        ratios=ratios, seeds=seeds, k=k)


@dataclass(frozen=True)
class AblationReport:
    """One row per (cell, seed, ratio), plus non-reproducible reference context."""

    rows: tuple[dict, ...]
    references: tuple[dict, ...] = REFERENCE_RESULTS


def _cell_checkpoint_path(out_dir: str, name: str, seed: int) -> str:
    return os.path.join(out_dir, f"{name}-seed{seed}.ckpt")


def _run_cell(task) -> list[dict]:
    """Train one (cell, seed) and evaluate it; top-level so workers can pickle it."""
    (name, cfg_text, seed, images, labels, ratios, k, ckpt_path, resume) = task
    config = parse_config(cfg_text)
    tr_idx, te_idx = stratified_split(labels, DEFAULT_TEST_FRACTION, seed=seed)
    if resume and ckpt_path is not None and os.path.exists(ckpt_path):
        ckpt = load_checkpoint(ckpt_path, expected=config)
    else:
        ckpt, _ = pretrain(config, images[tr_idx])
        if ckpt_path is not None:
            save_checkpoint(ckpt_path, ckpt)
    sweep = scale_sweep(ckpt.params, config, images[tr_idx], labels[tr_idx],
                        images[te_idx], labels[te_idx], ratios=ratios, k=k)
    rows = []
    for entry in sweep:
        row = {"cell": name, "seed": seed, **entry}
        for flag in ABLATION_FLAGS:
            row[flag] = getattr(config, flag)
        rows.append(row)
    return rows


def run_ablation(grid: AblationGrid, images: np.ndarray, labels: np.ndarray, *,
                 workers: int = 1, out_dir: str | None = None,
                 resume: bool = False) -> AblationReport:
    """Train every (cell, seed) from scratch and evaluate at the grid's ratios.

    All cells with the same seed consume identical crop/scale/mask streams,
    so accuracy differences are attributable to the flags alone. With
    ``out_dir`` set, per-cell checkpoints are written there; ``resume`` skips
    cells whose checkpoint already exists. ``workers`` > 1 runs cells in
    parallel processes (they are independent by construction).
    """
    if workers < 1:
        raise ConfigError(f"workers must be at least 1, got {workers}")
    if resume and out_dir is None:
        raise ConfigError("resume requires out_dir")
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    images = np.asarray(images)
    labels = np.asarray(labels)
    tasks = []
    for cell in grid.cells:
        for seed in grid.seeds:
            cfg = cell.config(grid.base, seed)
            ckpt_path = (_cell_checkpoint_path(out_dir, cell.name, seed)
                         if out_dir is not None else None)
            tasks.append((cell.name, config_to_text(cfg), seed, images, labels,
                          tuple(grid.ratios), grid.k, ckpt_path, resume))
    if workers == 1 or len(tasks) == 1:
        results = [_run_cell(task) for task in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            results = list(pool.map(_run_cell, tasks))
    rows = tuple(row for cell_rows in results for row in cell_rows)
    return AblationReport(rows=rows)


def _format_csv_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_sweep_csv(path: str, rows: list[dict]) -> None:
    """CSV with one row per evaluation ratio: ratio, k, accuracy."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["ratio", "k", "accuracy"])
        for row in rows:
            writer.writerow([_format_csv_value(row[key])
                             for key in ("ratio", "k", "accuracy")])


def write_ablation_csv(path: str, report: AblationReport) -> None:
    """CSV with one row per (cell, seed, ratio); references as comment lines."""
    fields = ["cell", "seed", "ratio", "k", *ABLATION_FLAGS, "accuracy"]
    with open(path, "w", newline="") as handle:
        for ref in report.references:
            parts = ", ".join(f"{key}={_format_csv_value(value)}"
                              for key, value in ref.items())
            handle.write(f"# reference (full scale, not reproducible here): {parts}\n")
        writer = csv.writer(handle)
        writer.writerow(fields)
        for row in report.rows:
            writer.writerow([_format_csv_value(row[key]) for key in fields])
