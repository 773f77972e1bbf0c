"""Experiment configuration: a flat, fully-explicit record of one run.

Config files are plain `key = value` text (comments with '#'); unknown
keys are hard errors so typos cannot silently fall back to defaults. The
canonical text rendering (sorted keys) round-trips through the parser and
is what gets hashed into checkpoints.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

from .errors import ConfigError
from .vit import DecoderConfig, EncoderConfig

__all__ = ["TrainConfig", "parse_config", "config_to_text", "config_hash",
           "toy_config"]


@dataclass(frozen=True)
class TrainConfig:
    # run budget: max_steps > 0 wins, otherwise epochs over the dataset
    epochs: int = 0
    max_steps: int = 0
    batch_size: int = 32
    base_lr: float = 1.5e-4        # scaled by batch_size/256 at run time
    warmup_steps: int = 0          # 0 means 5% of the total step budget
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    seed: int = 0
    precision: str = "float32"     # or "float64"

    # augmentation
    mask_ratio: float = 0.75
    scale_lo: float = 0.2
    scale_hi: float = 0.8
    base_gsd: float = 1.0

    # input standardization: views are mapped to (v - input_mean) / input_std
    # before entering the model, and reconstructions target that scale
    input_mean: float = 0.5
    input_std: float = 0.25

    # loss toggles (ablation columns)
    multi_scale: bool = True
    cross_consis: bool = True
    cross_pred: bool = True
    negatives_encoder: bool = True
    negatives_decoder: bool = False
    gsd_positional: bool = False

    # loss details
    temperature: float = 0.07
    include_anchor: bool = False
    stop_grad_target: bool = True
    masked_only: bool = True
    shared_mask: bool = False
    pooling: str = "cls"           # or "mean"

    # model geometry
    image_size: int = 128
    patch_size: int = 16
    channels: int = 3
    enc_width: int = 64
    enc_depth: int = 4
    enc_heads: int = 4
    dec_width: int = 32
    dec_depth: int = 2
    dec_heads: int = 2
    mlp_ratio: int = 4
    proj_dim: int = 128
    use_cls_token: bool = True

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.pooling not in ("cls", "mean"):
            raise ConfigError(f"pooling must be 'cls' or 'mean', got {self.pooling!r}")
        if self.pooling == "cls" and not self.use_cls_token:
            raise ConfigError("cls pooling requires use_cls_token")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if self.epochs < 0 or self.max_steps < 0 or self.warmup_steps < 0:
            raise ConfigError("epochs, max_steps and warmup_steps must be nonnegative")
        if not (0.0 <= self.mask_ratio < 1.0):
            raise ConfigError(f"mask_ratio must be in [0, 1), got {self.mask_ratio}")
        if not (0.0 < self.scale_lo < self.scale_hi <= 1.0):
            raise ConfigError(f"scale range must satisfy 0 < lo < hi <= 1, got [{self.scale_lo}, {self.scale_hi}]")
        if self.input_std <= 0.0:
            raise ConfigError(f"input_std must be positive, got {self.input_std}")
        # geometry constraints surface early rather than at first forward
        self.encoder_config()
        self.decoder_config()

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            image_size=self.image_size, patch_size=self.patch_size, channels=self.channels,
            width=self.enc_width, depth=self.enc_depth, heads=self.enc_heads,
            mlp_ratio=self.mlp_ratio, use_cls_token=self.use_cls_token,
            positional_mode="gsd" if self.gsd_positional else "standard",
            reference_gsd=self.base_gsd,
        )

    def decoder_config(self) -> DecoderConfig:
        return DecoderConfig(
            image_size=self.image_size, patch_size=self.patch_size, channels=self.channels,
            width=self.dec_width, depth=self.dec_depth, heads=self.dec_heads,
            mlp_ratio=self.mlp_ratio, use_cls_token=self.use_cls_token,
            positional_mode="gsd" if self.gsd_positional else "standard",
            reference_gsd=self.base_gsd,
        )

    def with_overrides(self, **kwargs) -> "TrainConfig":
        unknown = set(kwargs) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        return replace(self, **kwargs)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(text: str, target_type: type):
    text = text.strip()
    if target_type is bool:
        lowered = text.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"cannot read {text!r} as a boolean")
    if target_type is int:
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigError(f"cannot read {text!r} as an integer") from exc
    if target_type is float:
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigError(f"cannot read {text!r} as a number") from exc
    return text


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse flat key=value text; keys not in TrainConfig are hard errors."""
    field_types = {f.name: f.type for f in fields(TrainConfig)}
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in field_types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in overrides:
            raise ConfigError(f"line {lineno}: duplicate config key {key!r}")
        py_type = {"int": int, "float": float, "bool": bool, "str": str}[field_types[key]]
        overrides[key] = _parse_value(value, py_type)
    return (base or TrainConfig()).with_overrides(**overrides)


def config_to_text(cfg: TrainConfig) -> str:
    """Canonical rendering: sorted keys, one per line; parses back equal."""
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in sorted(fields(cfg), key=lambda f: f.name)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: TrainConfig) -> bytes:
    return hashlib.sha256(config_to_text(cfg).encode("utf-8")).digest()


def toy_config(**overrides) -> TrainConfig:
    """Desk-scale benchmark config: 32px single-channel images, 64-wide encoder.

    This is the configuration the bundled synthetic benchmark and the
    representation-quality checks are calibrated against.
    """
    base = dict(
        epochs=20, batch_size=16, base_lr=3e-2,
        image_size=32, patch_size=4, channels=1,
        enc_width=64, enc_depth=4, enc_heads=4,
        dec_width=32, dec_depth=2, dec_heads=2,
        proj_dim=32, pooling="cls",
    )
    base.update(overrides)
    return TrainConfig(**base)
