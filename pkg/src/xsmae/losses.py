"""The three training losses and their heads.

Three signals tie the two scale branches together:

- consistency: projected encoder representations of the two views form
  positive pairs in a symmetric InfoNCE over the batch (negatives can be
  switched to other-scale-only or off entirely for ablations);
- prediction: a small MLP maps the low-scale branch's decoder tokens onto
  the high-scale branch's (one-directional, target detached by default);
- reconstruction: per-branch pixel MSE, restricted to masked patches by
  default with a full-image mode available.

The total is the unit-weight sum of whichever components are enabled. All
reductions are means, so magnitudes are comparable across batch, token and
image sizes. Everything here is the vectorized implementation; the test
suite keeps an independent loop-based implementation as an oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ConsistencyError, DegenerateInputError, ShapeError
from .tensor import Tensor
from .vit import MaskSpec, ModelParams, patchify

__all__ = [
    "ProjectionHead", "Predictor", "ContrastiveBatch", "LossReport",
    "pool_encoder_tokens", "info_nce", "cross_consistency_loss",
    "cross_prediction_loss", "masked_reconstruction", "reconstruction_loss",
    "total_loss",
]


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

@dataclass
class ProjectionHead:
    """2-layer MLP from encoder width to the contrastive embedding space."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def from_params(cls, params: ModelParams) -> "ProjectionHead":
        return cls(params["gf.w1"], params["gf.b1"], params["gf.w2"], params["gf.b2"])

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(T.gelu(T.linear(x, self.w1, self.b1)), self.w2, self.b2)


@dataclass
class Predictor:
    """2-layer MLP over decoder tokens; applied to the low-scale branch only."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @classmethod
    def from_params(cls, params: ModelParams) -> "Predictor":
        return cls(params["gp.w1"], params["gp.b1"], params["gp.w2"], params["gp.b2"])

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(T.gelu(T.linear(x, self.w1, self.b1)), self.w2, self.b2)


def pool_encoder_tokens(f_e: Tensor, use_cls_token: bool, mode: str = "cls") -> Tensor:
    """Reduce encoder tokens [B, k(+1), D] to one vector per image [B, D]."""
    if mode == "cls":
        if not use_cls_token:
            raise ConfigError("cls pooling requires a model with a class token")
        return T.reshape(T.slice_axis(f_e, 1, 0, 1), (f_e.data.shape[0], f_e.data.shape[2]))
    if mode == "mean":
        start = 1 if use_cls_token else 0
        patches = T.slice_axis(f_e, 1, start, f_e.data.shape[1])
        return T.tmean(patches, axis=1)
    raise ConfigError(f"pooling mode must be 'cls' or 'mean', got {mode!r}")


# ---------------------------------------------------------------------------
# contrastive pieces
# ---------------------------------------------------------------------------

@dataclass
class ContrastiveBatch:
    """Projected representations of both branches plus the temperature."""

    z_l: Tensor
    z_h: Tensor
    temperature: float = 0.07

    def __post_init__(self):
        if self.z_l.data.shape != self.z_h.data.shape or self.z_l.data.ndim != 2:
            raise ShapeError(
                f"branch embeddings must be matching [N, D], got {self.z_l.data.shape} vs {self.z_h.data.shape}"
            )
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")


def _checked_row_norms(x: Tensor, what: str) -> Tensor:
    norms = np.linalg.norm(x.data, axis=-1)
    if not np.all(np.isfinite(x.data)):
        raise DegenerateInputError(f"{what} contain non-finite values")
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"{what} contain a zero-norm row")
    return T.sqrt(T.tsum(T.mul(x, x), axis=-1, keepdims=True))


def _normalize_rows(x: Tensor, what: str) -> Tensor:
    return T.div(x, _checked_row_norms(x, what))


def info_nce(anchor_idx: int, anchors: Tensor, candidates: Tensor,
             positive_idx: int, temperature: float) -> Tensor:
    """One anchor's InfoNCE term over an explicit candidate set.

    -log of the softmax weight (at the given temperature, cosine
    similarity) that the anchor assigns to the positive among all
    candidates.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if anchors.data.ndim != 2 or candidates.data.ndim != 2:
        raise ShapeError("anchors and candidates must be [N, D] matrices")
    if not (0 <= anchor_idx < anchors.data.shape[0]):
        raise ConfigError(f"anchor index {anchor_idx} out of range")
    if not (0 <= positive_idx < candidates.data.shape[0]):
        raise ConfigError(f"positive index {positive_idx} out of range")
    anchor = _normalize_rows(T.index_select(anchors, [anchor_idx], axis=0), "anchors")
    cands = _normalize_rows(candidates, "candidates")
    sims = T.reshape(T.matmul(cands, T.transpose(anchor, (1, 0))), (candidates.data.shape[0],))
    logits = sims * (1.0 / temperature)
    shift = float(logits.data.max())  # constant shift keeps exp in range
    denom = T.tsum(T.exp(logits - shift))
    pos = T.index_select(logits, [positive_idx], axis=0).sum()
    return (shift + T.log(denom)) - pos


def cross_consistency_loss(batch: ContrastiveBatch, negatives_mode: str = "all",
                           include_anchor: bool = False) -> Tensor:
    """Symmetric contrastive agreement between the two branches.

    Every embedding of either branch serves once as the anchor, with its
    other-scale counterpart as the positive. negatives_mode picks the
    candidate set: "all" (everything in the batch except the anchor),
    "other_scale" (only the other branch), or "off" (positive-only
    cosine distance, no denominator at all). include_anchor adds the
    anchor's own similarity term back into the denominator.
    """
    if negatives_mode not in ("all", "other_scale", "off"):
        raise ConfigError(f"negatives_mode must be 'all', 'other_scale' or 'off', got {negatives_mode!r}")
    n = batch.z_l.data.shape[0]
    if n < 1:
        raise ShapeError("need at least one pair")
    z = T.concat([batch.z_l, batch.z_h], axis=0)            # [2N, D]
    zh = _normalize_rows(z, "branch embeddings")
    sims = T.matmul(zh, T.transpose(zh, (1, 0)))             # [2N, 2N] cosines
    pos_cols = np.concatenate([np.arange(n) + n, np.arange(n)])
    pos_mask = np.zeros((2 * n, 2 * n))
    pos_mask[np.arange(2 * n), pos_cols] = 1.0
    pos_sims = T.tsum(sims * Tensor(pos_mask), axis=1)

    if negatives_mode == "off":
        return T.tmean(1.0 - pos_sims)

    if negatives_mode == "all":
        cand_mask = np.ones((2 * n, 2 * n))
        if not include_anchor:
            np.fill_diagonal(cand_mask, 0.0)
    else:  # other_scale: low anchors see only high embeddings and vice versa
        cand_mask = np.zeros((2 * n, 2 * n))
        cand_mask[:n, n:] = 1.0
        cand_mask[n:, :n] = 1.0
    logits = sims * (1.0 / batch.temperature)
    shift = float(logits.data.max())  # constant; keeps every exp at or below 1
    masked_exp = T.exp(logits - shift) * Tensor(cand_mask)
    lse = shift + T.log(T.tsum(masked_exp, axis=1))
    per_anchor = lse - pos_sims * (1.0 / batch.temperature)
    return T.tmean(per_anchor)


# ---------------------------------------------------------------------------
# prediction and reconstruction
# ---------------------------------------------------------------------------

def cross_prediction_loss(f_dl: Tensor, f_dh: Tensor, predictor: Predictor,
                          stop_grad_target: bool = True) -> Tensor:
    """MSE between predicted-from-low and actual high decoder tokens."""
    if f_dl.data.shape != f_dh.data.shape:
        raise ConsistencyError(
            f"branch token shapes differ: {f_dl.data.shape} vs {f_dh.data.shape}"
        )
    target = f_dh.detach() if stop_grad_target else f_dh
    return T.mse(predictor(f_dl), target)


def masked_reconstruction(target: Tensor, recon: Tensor, spec: MaskSpec,
                          patch_size: int, masked_only: bool = True) -> Tensor:
    """One branch's pixel MSE: masked patches by default, whole image otherwise."""
    if target.data.shape != recon.data.shape:
        raise ShapeError(f"reconstruction shape {recon.data.shape} differs from target {target.data.shape}")
    if not masked_only:
        return T.mse(recon, target.detach())
    if len(spec.masked_idx) == 0:
        return Tensor(np.zeros((), dtype=recon.data.dtype))
    pred_patches = patchify(recon, patch_size).patches
    true_patches = patchify(target, patch_size).patches
    pred_masked = T.index_select(pred_patches, spec.masked_idx, axis=1)
    true_masked = T.index_select(true_patches, spec.masked_idx, axis=1)
    return T.mse(pred_masked, true_masked.detach())


def reconstruction_loss(pair, recon_l: Tensor, recon_h: Tensor,
                        mask_specs: tuple[MaskSpec, MaskSpec], patch_size: int,
                        masked_only: bool = True) -> Tensor:
    """Pixel MSE of both branches (low spec first), masked patches only by default."""
    spec_l, spec_h = mask_specs
    target_l = pair.p_l if isinstance(pair.p_l, Tensor) else Tensor(pair.p_l)
    target_h = pair.p_h if isinstance(pair.p_h, Tensor) else Tensor(pair.p_h)
    low = masked_reconstruction(target_l, recon_l, spec_l, patch_size, masked_only)
    high = masked_reconstruction(target_h, recon_h, spec_h, patch_size, masked_only)
    return low + high


# ---------------------------------------------------------------------------
# total
# ---------------------------------------------------------------------------

@dataclass
class LossReport:
    """Component values, their enabled flags, and the differentiable total."""

    l_cc: float
    l_cp: float
    l_re: float
    cc_enabled: bool
    cp_enabled: bool
    re_enabled: bool
    total: float
    total_tensor: Tensor


def total_loss(l_cc: Tensor | None = None, l_cp: Tensor | None = None,
               l_re: Tensor | None = None) -> LossReport:
    """Unit-weight sum of the enabled components; at least one required."""
    enabled = [t for t in (l_cc, l_cp, l_re) if t is not None]
    if not enabled:
        raise ConfigError("all loss components are disabled")
    total = enabled[0]
    for t in enabled[1:]:
        total = total + t
    return LossReport(
        l_cc=float(l_cc.data) if l_cc is not None else 0.0,
        l_cp=float(l_cp.data) if l_cp is not None else 0.0,
        l_re=float(l_re.data) if l_re is not None else 0.0,
        cc_enabled=l_cc is not None,
        cp_enabled=l_cp is not None,
        re_enabled=l_re is not None,
        total=float(total.data),
        total_tensor=total,
    )
