"""Pretraining: optimizer, schedule, the two-branch step, and the run loop.

Each step draws one scale-ratio pair for the whole batch, builds both
views, masks each branch from its own named rng stream, runs the shared
encoder/decoder on both, sums the enabled losses into one scalar, and
takes a single optimizer step. Loss toggles never touch the mask/scale
streams, so ablation cells see identical data and differ only in the
training signal.

With multi_scale off the step degenerates to a plain single-branch masked
autoencoder: only the full-scale view, reconstruction loss alone.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .augment import ScaledPair, sample_scale_pair, scale_augment
from .checkpoint import Checkpoint
from .config import TrainConfig
from .errors import ConfigError, ConsistencyError, DivergenceError, ShapeError
from .losses import (
    ContrastiveBatch,
    LossReport,
    Predictor,
    ProjectionHead,
    cross_consistency_loss,
    cross_prediction_loss,
    masked_reconstruction,
    pool_encoder_tokens,
    total_loss,
)
from .rng import RngPool, derive_generator
from .tensor import Tensor
from .vit import ModelParams, decode, encode, init_params, patchify, random_mask

__all__ = [
    "AdamState", "adam_step", "lr_schedule", "make_scaled_batch",
    "standardize_views", "train_step", "pretrain", "total_step_budget",
]

# parameters that never receive weight decay: anything 1-d plus the tokens
_NO_DECAY_NAMES = ("cls", "mask_token")


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def lr_schedule(step: int, warmup: int, total: int, base_lr: float) -> float:
    """Linear warmup to base_lr at `warmup`, then cosine decay to 0 at `total`."""
    if not (1 <= step <= total):
        raise ConfigError(f"step {step} outside the schedule range [1, {total}]")
    if warmup < 0 or warmup > total:
        raise ConfigError(f"warmup {warmup} must lie within [0, {total}]")
    if base_lr <= 0:
        raise ConfigError(f"base_lr must be positive, got {base_lr}")
    if warmup > 0 and step <= warmup:
        return base_lr * step / warmup
    if total == warmup:
        return base_lr
    progress = (step - warmup) / (total - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def adam_step(params: ModelParams, state: AdamState, lr_t: float,
              betas: tuple[float, float] = (0.9, 0.95), eps: float = 1e-8,
              weight_decay: float = 0.05, step_index: int | None = None) -> None:
    """Decoupled-weight-decay adaptive-moment update, bias-corrected.

    Parameters with no gradient this step keep their moments decaying but
    receive no update beyond weight decay. Moments live in the parameter
    dtype so checkpointed state is exact.
    """
    if lr_t < 0:
        raise ConfigError(f"learning rate must be nonnegative, got {lr_t}")
    beta1, beta2 = betas
    state.t += 1
    t = state.t
    where = f" at step {step_index}" if step_index is not None else ""
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in {name!r}{where}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        update = m_hat / (np.sqrt(v_hat) + eps)
        decay = weight_decay if (p.data.ndim >= 2 and name not in _NO_DECAY_NAMES) else 0.0
        p.data = p.data - lr_t * update - (lr_t * decay) * p.data


def make_scaled_batch(images: np.ndarray, rng: np.random.Generator,
                      config: TrainConfig) -> ScaledPair:
    """Both views for a whole batch; one ratio pair per step, per-image crops."""
    r_h, r_l = sample_scale_pair(rng, config.scale_lo, config.scale_hi)
    p_h = np.stack([scale_augment(img, r_h, config.image_size, rng) for img in images])
    p_l = np.stack([scale_augment(img, r_l, config.image_size, rng) for img in images])
    return ScaledPair(p_h=p_h, p_l=p_l, r_h=r_h, r_l=r_l,
                      g_h=config.base_gsd / r_h, g_l=config.base_gsd / r_l)


def standardize_views(views: np.ndarray, config: TrainConfig) -> np.ndarray:
    """Affine map to the model's input scale; recon targets live here too."""
    return (views - config.input_mean) / config.input_std


def _branch_forward(view: Tensor, gsd: float, params: ModelParams, config: TrainConfig,
                    mask_spec) -> tuple[Tensor, Tensor, Tensor]:
    enc_cfg, dec_cfg = config.encoder_config(), config.decoder_config()
    f_e = encode(view, params, enc_cfg, mask_spec, gsd=gsd)
    f_d, recon = decode(f_e, params, dec_cfg, mask_spec, gsd=gsd)
    return f_e, f_d, recon


def _decoder_patch_tokens(f_d: Tensor, config: TrainConfig) -> Tensor:
    offset = 1 if config.use_cls_token else 0
    s = config.encoder_config().num_patches
    return T.slice_axis(f_d, 1, offset, offset + s)


def train_step(images: np.ndarray, params: ModelParams, config: TrainConfig,
               streams: RngPool, adam: AdamState, lr_t: float,
               step_index: int | None = None) -> LossReport:
    """One optimizer step over a batch; returns the loss breakdown."""
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ShapeError(f"need a nonempty [B, H, W, C] batch, got shape {images.shape}")
    if images.shape[3] != config.channels:
        raise ConsistencyError(
            f"batch has {images.shape[3]} channels, config expects {config.channels}"
        )
    dtype = np.float32 if config.precision == "float32" else np.float64

    if config.multi_scale:
        pair = make_scaled_batch(images, streams.stream("scale"), config)
    else:
        full = np.stack([scale_augment(img, 1.0, config.image_size) for img in images])
        pair = None

    view_h = Tensor(standardize_views(pair.p_h if pair is not None else full, config).astype(dtype))
    gsd_h = pair.g_h if pair is not None else config.base_gsd
    seq_h = patchify(view_h, config.patch_size)
    _, spec_h = random_mask(seq_h, config.mask_ratio, streams.stream("mask.high"))
    f_e_h, f_d_h, recon_h = _branch_forward(view_h, gsd_h, params, config, spec_h)

    l_re = masked_reconstruction(view_h, recon_h, spec_h, config.patch_size,
                                 masked_only=config.masked_only)
    l_cc = l_cp = None

    if config.multi_scale:
        view_l = Tensor(standardize_views(pair.p_l, config).astype(dtype))
        seq_l = patchify(view_l, config.patch_size)
        if config.shared_mask:
            spec_l = spec_h
        else:
            _, spec_l = random_mask(seq_l, config.mask_ratio, streams.stream("mask.low"))
        f_e_l, f_d_l, recon_l = _branch_forward(view_l, pair.g_l, params, config, spec_l)
        l_re = l_re + masked_reconstruction(view_l, recon_l, spec_l, config.patch_size,
                                            masked_only=config.masked_only)

        if config.cross_consis:
            head = ProjectionHead.from_params(params)
            z_h = head(pool_encoder_tokens(f_e_h, config.use_cls_token, config.pooling))
            z_l = head(pool_encoder_tokens(f_e_l, config.use_cls_token, config.pooling))
            batch = ContrastiveBatch(z_l=z_l, z_h=z_h, temperature=config.temperature)
            mode = "all" if config.negatives_encoder else "off"
            l_cc = cross_consistency_loss(batch, mode, include_anchor=config.include_anchor)

        if config.cross_pred:
            predictor = Predictor.from_params(params)
            tokens_l = _decoder_patch_tokens(f_d_l, config)
            tokens_h = _decoder_patch_tokens(f_d_h, config)
            if config.negatives_decoder:
                # contrastive variant: pooled predicted-low vs pooled high tokens
                z_dl = T.tmean(predictor(tokens_l), axis=1)
                z_dh = T.tmean(tokens_h, axis=1)
                dec_batch = ContrastiveBatch(z_l=z_dl, z_h=z_dh, temperature=config.temperature)
                l_cp = cross_consistency_loss(dec_batch, "all")
            else:
                l_cp = cross_prediction_loss(tokens_l, tokens_h, predictor,
                                             stop_grad_target=config.stop_grad_target)

    report = total_loss(l_cc=l_cc, l_cp=l_cp, l_re=l_re)
    where = f" at step {step_index}" if step_index is not None else ""
    for comp, value, enabled in (("consistency", report.l_cc, report.cc_enabled),
                                 ("prediction", report.l_cp, report.cp_enabled),
                                 ("reconstruction", report.l_re, report.re_enabled)):
        if enabled and not math.isfinite(value):
            raise DivergenceError(f"{comp} loss is non-finite{where}")

    params.zero_grad()
    report.total_tensor.backward()
    adam_step(params, adam, lr_t, betas=(config.beta1, config.beta2),
              eps=config.adam_eps, weight_decay=config.weight_decay,
              step_index=step_index)
    return report


# ---------------------------------------------------------------------------
# run loop
# ---------------------------------------------------------------------------

def _steps_per_epoch(config: TrainConfig, num_images: int) -> int:
    if num_images < config.batch_size:
        raise ConfigError(
            f"dataset of {num_images} images is smaller than batch_size {config.batch_size}"
        )
    return num_images // config.batch_size


def total_step_budget(config: TrainConfig, num_images: int) -> int:
    """max_steps if set, otherwise epochs * full batches per epoch."""
    if config.max_steps > 0:
        return config.max_steps
    if config.epochs > 0:
        return config.epochs * _steps_per_epoch(config, num_images)
    raise ConfigError("config must set epochs or max_steps")


def _epoch_permutation(seed: int, epoch: int, num_images: int) -> np.ndarray:
    # keyed, stateless derivation: batch composition is a pure function of
    # the step, so mid-epoch resume rebuilds the same batches
    return derive_generator(seed, f"shuffle.epoch.{epoch}").permutation(num_images)


def pretrain(config: TrainConfig, images: np.ndarray, *,
             resume: Checkpoint | None = None, stop_after_step: int | None = None,
             on_step=None) -> tuple[Checkpoint, list[dict]]:
    """Run (or resume) pretraining; returns the final checkpoint and step log.

    The log holds one dict per executed step: step, lr, l_cc, l_cp, l_re,
    total. Identical config + seed + dataset gives a bit-identical
    trajectory; resuming from a checkpoint continues it exactly.
    """
    images = np.asarray(images)
    if images.ndim != 4:
        raise ShapeError(f"need [N, H, W, C] images, got shape {images.shape}")
    n = images.shape[0]
    spe = _steps_per_epoch(config, n)
    total = total_step_budget(config, n)
    warmup = config.warmup_steps if config.warmup_steps > 0 else max(1, math.ceil(0.05 * total))
    lr_base = config.base_lr * config.batch_size / 256.0
    dtype = np.float32 if config.precision == "float32" else np.float64

    streams = RngPool(config.seed)
    if resume is None:
        params = init_params(config.encoder_config(), config.decoder_config(),
                             config.proj_dim, streams.stream("init"), dtype=dtype)
        adam = AdamState()
        start = 0
    else:
        from .config import config_hash
        if config_hash(resume.config) != config_hash(config):
            raise ConfigError("resume checkpoint was produced by a different config")
        params = resume.params
        adam = AdamState(m=dict(resume.adam_m), v=dict(resume.adam_v), t=resume.step)
        streams.set_state(resume.rng_state)
        start = resume.step

    end = total if stop_after_step is None else min(total, stop_after_step)
    rows: list[dict] = []
    for step in range(start, end):
        epoch, slot = divmod(step, spe)
        perm = _epoch_permutation(config.seed, epoch, n)
        batch = images[perm[slot * config.batch_size:(slot + 1) * config.batch_size]]
        lr_t = lr_schedule(step + 1, warmup, total, lr_base)
        report = train_step(batch, params, config, streams, adam, lr_t, step_index=step + 1)
        rows.append({"step": step + 1, "lr": lr_t, "l_cc": report.l_cc,
                     "l_cp": report.l_cp, "l_re": report.l_re, "total": report.total})
        if on_step is not None:
            on_step(step + 1, report)
    ckpt = Checkpoint(config=config, params=params, step=end,
                      adam_m=dict(adam.m), adam_v=dict(adam.v),
                      rng_state=streams.state())
    return ckpt, rows
