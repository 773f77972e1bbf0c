"""Masked vision-transformer autoencoder: patches, positions, encoder, decoder.

The encoder only ever sees visible patches — masking happens by gathering
patch indices before embedding, so masked pixels cannot influence encoder
output. The decoder rebuilds the full grid by inserting a learned mask
token at every masked position (position-addressed, so the order of the
masked index list is irrelevant), adds positional encodings, runs its own
block stack, and maps tokens back to pixels with a linear head.

Positional encodings are fixed 2-D sine/cosine tables. The alternative
"gsd" mode scales grid coordinates by ground-sample distance relative to a
reference, so one ground extent maps to the same frequencies across scales;
at the reference GSD it reproduces the standard table bit-exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .errors import ConfigError, ConsistencyError, ShapeError
from .tensor import Tensor

__all__ = [
    "PatchSequence", "MaskSpec", "EncoderConfig", "DecoderConfig", "ModelParams",
    "patchify", "unpatchify", "positional_encoding", "random_mask",
    "encode", "decode", "init_params",
]


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _TowerConfig:
    image_size: int = 128
    patch_size: int = 16
    channels: int = 3
    width: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    use_cls_token: bool = True
    positional_mode: str = "standard"   # or "gsd"
    reference_gsd: float = 1.0

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} not divisible by {self.heads} heads")
        if self.depth < 0 or self.mlp_ratio < 1 or self.channels < 1:
            raise ConfigError("depth >= 0, mlp_ratio >= 1, channels >= 1 required")
        if self.positional_mode not in ("standard", "gsd"):
            raise ConfigError(f"positional_mode must be 'standard' or 'gsd', got {self.positional_mode!r}")
        if self.reference_gsd <= 0:
            raise ConfigError(f"reference_gsd must be positive, got {self.reference_gsd}")
        # the 2-d table splits width over two axes, each axis over sin and cos
        if self.width % 4 != 0:
            raise ConfigError(f"width must be divisible by 4 for 2-d sin/cos positions, got {self.width}")

    @property
    def grid(self) -> tuple[int, int]:
        side = self.image_size // self.patch_size
        return (side, side)

    @property
    def num_patches(self) -> int:
        r, c = self.grid
        return r * c

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass(frozen=True)
class EncoderConfig(_TowerConfig):
    pass


@dataclass(frozen=True)
class DecoderConfig(_TowerConfig):
    width: int = 32
    depth: int = 2
    heads: int = 2


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchSequence:
    """Row-major, channel-last flattened patches of a batch of images."""

    patches: Tensor            # [B, |S|, n*n*C]
    grid: tuple[int, int]
    patch_size: int

    @property
    def num_patches(self) -> int:
        return self.grid[0] * self.grid[1]


def patchify(img: Tensor, patch_size: int) -> PatchSequence:
    """[B,H,W,C] -> [B, |S|, n*n*C]; exact inverse of unpatchify."""
    if img.data.ndim != 4:
        raise ShapeError(f"patchify expects [B, H, W, C], got {img.data.shape}")
    b, h, w, c = img.data.shape
    n = patch_size
    if h % n != 0 or w % n != 0:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {n}")
    gh, gw = h // n, w // n
    x = T.reshape(img, (b, gh, n, gw, n, c))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))          # [B, gh, gw, n, n, C]
    x = T.reshape(x, (b, gh * gw, n * n * c))
    return PatchSequence(patches=x, grid=(gh, gw), patch_size=n)


def unpatchify(patches: Tensor, grid: tuple[int, int], patch_size: int, channels: int) -> Tensor:
    """[B, |S|, n*n*C] -> [B, H, W, C]."""
    gh, gw = grid
    n = patch_size
    b, s, d = patches.data.shape
    if s != gh * gw or d != n * n * channels:
        raise ShapeError(f"patch tensor {patches.data.shape} does not match grid {grid}, n={n}, C={channels}")
    x = T.reshape(patches, (b, gh, gw, n, n, channels))
    x = T.transpose(x, (0, 1, 3, 2, 4, 5))          # [B, gh, n, gw, n, C]
    return T.reshape(x, (b, gh * n, gw * n, channels))


# ---------------------------------------------------------------------------
# positional encoding
# ---------------------------------------------------------------------------

def _sincos_1d(width: int, positions: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000.0 ** (np.arange(width // 2, dtype=np.float64) / (width // 2))
    angles = np.outer(positions, omega)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def positional_encoding(grid: tuple[int, int], width: int, mode: str = "standard",
                        gsd: float | None = None, reference_gsd: float = 1.0) -> np.ndarray:
    """Fixed [rows*cols, width] table; row-major to match patchify order.

    In gsd mode grid coordinates are multiplied by gsd/reference_gsd before
    the sin/cos, so the table is a pure function of ground extent.
    """
    if width % 4 != 0:
        raise ConfigError(f"width must be divisible by 4 for 2-d sin/cos positions, got {width}")
    if mode not in ("standard", "gsd"):
        raise ConfigError(f"positional mode must be 'standard' or 'gsd', got {mode!r}")
    rows, cols = grid
    hh = np.arange(rows, dtype=np.float64)
    ww = np.arange(cols, dtype=np.float64)
    if mode == "gsd":
        if gsd is None:
            raise ConfigError("gsd positional mode needs a gsd value")
        if gsd <= 0 or reference_gsd <= 0:
            raise ConfigError(f"gsd and reference_gsd must be positive, got {gsd}, {reference_gsd}")
        hh = hh * (gsd / reference_gsd)
        ww = ww * (gsd / reference_gsd)
    h_grid = np.repeat(hh, cols)
    w_grid = np.tile(ww, rows)
    return np.concatenate([_sincos_1d(width // 2, h_grid), _sincos_1d(width // 2, w_grid)], axis=1)


# ---------------------------------------------------------------------------
# masking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MaskSpec:
    """Disjoint sorted index partition of the patch grid."""

    visible_idx: np.ndarray
    masked_idx: np.ndarray
    mask_ratio: float

    def __post_init__(self):
        vis, msk = np.asarray(self.visible_idx), np.asarray(self.masked_idx)
        total = len(vis) + len(msk)
        combined = np.concatenate([vis, msk])
        if not np.array_equal(np.sort(combined), np.arange(total)):
            raise ConsistencyError("visible and masked indices must partition the patch grid")
        if len(msk) != int(round(self.mask_ratio * total)):
            raise ConsistencyError(
                f"masked count {len(msk)} does not equal round({self.mask_ratio} * {total})"
            )

    @property
    def num_patches(self) -> int:
        return len(self.visible_idx) + len(self.masked_idx)


def random_mask(seq: PatchSequence, mask_ratio: float,
                rng: np.random.Generator) -> tuple[Tensor, MaskSpec]:
    """Uniform mask without replacement; one pattern shared across the batch."""
    if not (0.0 <= mask_ratio < 1.0):
        raise ConfigError(f"mask ratio must be in [0, 1), got {mask_ratio}")
    s = seq.num_patches
    n_masked = int(round(mask_ratio * s))
    if s - n_masked == 0:
        raise ConfigError(f"mask ratio {mask_ratio} leaves no visible patches out of {s}")
    perm = rng.permutation(s)
    masked = np.sort(perm[:n_masked])
    visible = np.sort(perm[n_masked:])
    spec = MaskSpec(visible_idx=visible, masked_idx=masked, mask_ratio=mask_ratio)
    return T.index_select(seq.patches, visible, axis=1), spec


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

class ModelParams:
    """Named parameter tensors in a stable insertion order."""

    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None


def _trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


def _xavier_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    # fan counts over the last two axes, matching the usual linear-layer rule
    fan_in, fan_out = shape[-2], shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def _init_block(out: dict, prefix: str, width: int, mlp_ratio: int,
                rng: np.random.Generator, dtype) -> None:
    hidden = width * mlp_ratio

    def p(name, arr):
        out[f"{prefix}.{name}"] = Tensor(arr.astype(dtype), requires_grad=True)

    p("ln1.gamma", np.ones(width))
    p("ln1.beta", np.zeros(width))
    for w_name in ("attn.wq", "attn.wk", "attn.wv", "attn.wo"):
        p(w_name, _xavier_uniform(rng, (width, width)))
    for b_name in ("attn.bq", "attn.bk", "attn.bv", "attn.bo"):
        p(b_name, np.zeros(width))
    p("ln2.gamma", np.ones(width))
    p("ln2.beta", np.zeros(width))
    p("mlp.w1", _xavier_uniform(rng, (width, hidden)))
    p("mlp.b1", np.zeros(hidden))
    p("mlp.w2", _xavier_uniform(rng, (hidden, width)))
    p("mlp.b2", np.zeros(width))


def init_params(encoder: EncoderConfig, decoder: DecoderConfig, proj_dim: int,
                rng: np.random.Generator, dtype=np.float32) -> ModelParams:
    """Fresh parameters: xavier-uniform weight matrices, truncated-normal
    (std 0.02) token vectors, zero biases."""
    if (encoder.image_size, encoder.patch_size, encoder.channels) != \
            (decoder.image_size, decoder.patch_size, decoder.channels):
        raise ConsistencyError("encoder and decoder must agree on image geometry")
    if encoder.use_cls_token != decoder.use_cls_token:
        raise ConsistencyError("encoder and decoder must agree on the class-token flag")
    if proj_dim < 1:
        raise ConfigError(f"proj_dim must be positive, got {proj_dim}")

    out: dict[str, Tensor] = {}

    def p(name, arr):
        out[name] = Tensor(arr.astype(dtype), requires_grad=True)

    p("embed.w", _xavier_uniform(rng, (encoder.patch_dim, encoder.width)))
    p("embed.b", np.zeros(encoder.width))
    if encoder.use_cls_token:
        p("cls", _trunc_normal(rng, (1, 1, encoder.width)))
    for i in range(encoder.depth):
        _init_block(out, f"enc.{i}", encoder.width, encoder.mlp_ratio, rng, dtype)
    p("enc_to_dec.w", _xavier_uniform(rng, (encoder.width, decoder.width)))
    p("enc_to_dec.b", np.zeros(decoder.width))
    p("mask_token", _trunc_normal(rng, (1, 1, decoder.width)))
    for i in range(decoder.depth):
        _init_block(out, f"dec.{i}", decoder.width, decoder.mlp_ratio, rng, dtype)
    p("recon.w", _xavier_uniform(rng, (decoder.width, decoder.patch_dim)))
    p("recon.b", np.zeros(decoder.patch_dim))
    # contrastive projection head on encoder tokens
    p("gf.w1", _xavier_uniform(rng, (encoder.width, 2 * encoder.width)))
    p("gf.b1", np.zeros(2 * encoder.width))
    p("gf.w2", _xavier_uniform(rng, (2 * encoder.width, proj_dim)))
    p("gf.b2", np.zeros(proj_dim))
    # cross-scale predictor on decoder tokens
    p("gp.w1", _xavier_uniform(rng, (decoder.width, 2 * decoder.width)))
    p("gp.b1", np.zeros(2 * decoder.width))
    p("gp.w2", _xavier_uniform(rng, (2 * decoder.width, decoder.width)))
    p("gp.b2", np.zeros(decoder.width))
    return ModelParams(out)


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------

def _run_block(x: Tensor, params: ModelParams, prefix: str, heads: int) -> Tensor:
    h = T.layer_norm(x, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"])
    x = x + T.multi_head_attention(
        h,
        params[f"{prefix}.attn.wq"], params[f"{prefix}.attn.bq"],
        params[f"{prefix}.attn.wk"], params[f"{prefix}.attn.bk"],
        params[f"{prefix}.attn.wv"], params[f"{prefix}.attn.bv"],
        params[f"{prefix}.attn.wo"], params[f"{prefix}.attn.bo"],
        heads,
    )
    h = T.layer_norm(x, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"])
    h = T.linear(T.gelu(T.linear(h, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"])),
                 params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])
    return x + h


def _resolve_pe(cfg, width: int, gsd: float | None) -> np.ndarray:
    if cfg.positional_mode == "gsd" and gsd is None:
        raise ConfigError("model is in gsd positional mode but no gsd was given")
    return positional_encoding(cfg.grid, width, cfg.positional_mode,
                               gsd=gsd, reference_gsd=cfg.reference_gsd)


def encode(img: Tensor, params: ModelParams, config: EncoderConfig,
           mask_spec: MaskSpec, gsd: float | None = None) -> Tensor:
    """Embed visible patches, add positions, run the encoder stack.

    Masked patches are dropped before embedding, so their pixels cannot
    reach the output.
    """
    seq = patchify(img, config.patch_size)
    if mask_spec.num_patches != seq.num_patches:
        raise ConsistencyError(
            f"mask covers {mask_spec.num_patches} patches but the grid has {seq.num_patches}"
        )
    visible = T.index_select(seq.patches, mask_spec.visible_idx, axis=1)
    tokens = T.linear(visible, params["embed.w"], params["embed.b"])
    pe = _resolve_pe(config, config.width, gsd)[mask_spec.visible_idx]
    tokens = tokens + Tensor(pe.astype(params["embed.w"].data.dtype))
    if config.use_cls_token:
        b = tokens.data.shape[0]
        cls = T.broadcast_to(params["cls"], (b, 1, config.width))
        tokens = T.concat([cls, tokens], axis=1)
    for i in range(config.depth):
        tokens = _run_block(tokens, params, f"enc.{i}", config.heads)
    return tokens


def decode(f_e: Tensor, params: ModelParams, config: DecoderConfig,
           mask_spec: MaskSpec, gsd: float | None = None) -> tuple[Tensor, Tensor]:
    """Fill masked positions with the mask token, decode, reconstruct pixels.

    Returns (f_d, recon): the full-grid token output of the last decoder
    block (class token first when configured) and the reconstructed image.
    """
    s = config.num_patches
    if mask_spec.num_patches != s:
        raise ConsistencyError(f"mask covers {mask_spec.num_patches} patches but the grid has {s}")
    n_vis = len(mask_spec.visible_idx)
    cls_offset = 1 if config.use_cls_token else 0
    if f_e.data.shape[1] != n_vis + cls_offset:
        raise ConsistencyError(
            f"encoder output has {f_e.data.shape[1]} tokens but the mask implies {n_vis + cls_offset}"
        )
    b = f_e.data.shape[0]
    x = T.linear(f_e, params["enc_to_dec.w"], params["enc_to_dec.b"])
    if config.use_cls_token:
        cls, vis = T.slice_axis(x, 1, 0, 1), T.slice_axis(x, 1, 1, n_vis + 1)
    else:
        cls, vis = None, x
    n_masked = s - n_vis
    if n_masked > 0:
        mask_tok = T.broadcast_to(params["mask_token"], (b, n_masked, config.width))
        stacked = T.concat([vis, mask_tok], axis=1)
    else:
        stacked = vis
    # row j of `stacked` carries grid position order[j]; invert to grid order
    order = np.concatenate([mask_spec.visible_idx, mask_spec.masked_idx])
    unshuffle = np.argsort(order)
    tokens = T.index_select(stacked, unshuffle, axis=1)
    pe = _resolve_pe(config, config.width, gsd)
    tokens = tokens + Tensor(pe.astype(params["mask_token"].data.dtype))
    if cls is not None:
        tokens = T.concat([cls, tokens], axis=1)
    for i in range(config.depth):
        tokens = _run_block(tokens, params, f"dec.{i}", config.heads)
    f_d = tokens
    patch_tokens = T.slice_axis(f_d, 1, cls_offset, cls_offset + s)
    pixels = T.linear(patch_tokens, params["recon.w"], params["recon.b"])
    recon = unpatchify(pixels, config.grid, config.patch_size, config.channels)
    return f_d, recon
