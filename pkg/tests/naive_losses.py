"""Independent loop-based loss implementations used as oracles.

Everything here is written directly from the loss definitions with
explicit Python loops and plain numpy scalars — no shared code with the
vectorized implementations under test.
"""

import math

import numpy as np
from scipy.special import erf


def _cos(a, b):
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def _gelu(x):
    return x * 0.5 * (1.0 + erf(x / math.sqrt(2.0)))


def naive_info_nce(anchor, candidates, positive_idx, tau):
    """-log softmax weight of the positive among all candidates."""
    num = math.exp(_cos(anchor, candidates[positive_idx]) / tau)
    den = sum(math.exp(_cos(anchor, c) / tau) for c in candidates)
    return -math.log(num / den)


def naive_cross_consistency(z_l, z_h, tau, mode="all", include_anchor=False):
    """Symmetric batch contrastive loss, one anchor at a time."""
    n = len(z_l)
    everything = [np.asarray(v, dtype=np.float64) for v in list(z_l) + list(z_h)]
    total = 0.0
    for k in range(n):
        for anchor_pos, positive in (((k), everything[n + k]), ((n + k), everything[k])):
            anchor = everything[anchor_pos]
            if mode == "off":
                total += 1.0 - _cos(anchor, positive)
                continue
            if mode == "all":
                cands = [v for j, v in enumerate(everything) if include_anchor or j != anchor_pos]
            elif mode == "other_scale":
                cands = everything[n:] if anchor_pos < n else everything[:n]
            else:
                raise ValueError(mode)
            num = math.exp(_cos(anchor, positive) / tau)
            den = sum(math.exp(_cos(anchor, c) / tau) for c in cands)
            total += -math.log(num / den)
    return total / (2 * n)


def naive_cross_prediction(f_dl, f_dh, w1, b1, w2, b2):
    """Token-by-token MLP prediction error, mean over every element."""
    f_dl, f_dh = np.asarray(f_dl, dtype=np.float64), np.asarray(f_dh, dtype=np.float64)
    n_img, n_tok, dim = f_dl.shape
    total = 0.0
    for k in range(n_img):
        for t in range(n_tok):
            hidden = _gelu(f_dl[k, t] @ w1 + b1)
            pred = hidden @ w2 + b2
            total += float(((pred - f_dh[k, t]) ** 2).sum())
    return total / (n_img * n_tok * dim)


def _naive_patches(images, patch_size):
    images = np.asarray(images, dtype=np.float64)
    b, h, w, c = images.shape
    n = patch_size
    out = []
    for k in range(b):
        rows = []
        for i in range(0, h, n):
            for j in range(0, w, n):
                rows.append(images[k, i:i + n, j:j + n, :].reshape(-1))
        out.append(rows)
    return np.asarray(out)  # [B, |S|, n*n*C]


def naive_reconstruction(target_l, recon_l, masked_l, target_h, recon_h, masked_h,
                         patch_size, masked_only=True):
    """Per-branch pixel MSE, masked patches only unless told otherwise."""
    total = 0.0
    for target, recon, masked in ((target_l, recon_l, masked_l), (target_h, recon_h, masked_h)):
        if not masked_only:
            diff = np.asarray(recon, dtype=np.float64) - np.asarray(target, dtype=np.float64)
            total += float((diff ** 2).mean())
            continue
        if len(masked) == 0:
            continue
        pred = _naive_patches(recon, patch_size)
        true = _naive_patches(target, patch_size)
        errs = []
        for k in range(pred.shape[0]):
            for idx in masked:
                errs.extend(((pred[k, idx] - true[k, idx]) ** 2).tolist())
        total += float(np.mean(errs))
    return total
