"""Multi-scale view augmentation and a procedural labeled texture dataset.

The augmentation produces two views of one image at different scale
ratios: a random crop of side ratio*original is area-resampled and then
bilinearly resized to a fixed output size, so lower ratios see less
context at coarser effective resolution. Both resamplers are built from
row-stochastic weight matrices, which makes them constant-preserving and
range-preserving by construction.

The synthetic dataset provides four texture classes (three stripe
orientations plus an isotropic band-pass texture) whose identity is
carried by orientation energy in a mid-frequency annulus - a statistic
that survives the scale augmentation. Generation can self-verify with a
linear probe on hand-crafted spectral features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError, OracleError, ShapeError

__all__ = [
    "AugmentConfig", "ScaledPair", "SyntheticDatasetSpec",
    "area_resample", "bilinear_resize", "sample_scale_pair", "scale_augment",
    "make_scaled_pair", "generate_synthetic_dataset",
    "orientation_energy_features", "linear_probe_accuracy", "verify_dataset",
]


# ---------------------------------------------------------------------------
# resampling kernels
# ---------------------------------------------------------------------------

def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic [n_out, n_in] matrix of interval-overlap fractions."""
    scale = n_in / n_out
    w = np.zeros((n_out, n_in))
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, n_in)):
            w[i, j] = min(hi, j + 1) - max(lo, j)
    return w / w.sum(axis=1, keepdims=True)


def _bilinear_weights(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic [n_out, n_in] matrix; each row is a 2-tap convex blend.

    Source coordinates follow the half-pixel-center convention, clamped at
    the borders, so n -> n is exactly the identity.
    """
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    left = np.floor(src).astype(int)
    right = np.minimum(left + 1, n_in - 1)
    frac = src - left
    w = np.zeros((n_out, n_in))
    w[np.arange(n_out), left] += 1.0 - frac
    w[np.arange(n_out), right] += frac
    return w


def _apply_separable(img: np.ndarray, wh: np.ndarray, ww: np.ndarray) -> np.ndarray:
    # img is [H, W, C]; contract H with wh then W with ww
    out = np.tensordot(wh, img, axes=(1, 0))        # [out_h, W, C]
    out = np.tensordot(ww, out, axes=(1, 1))        # [out_w, out_h, C]
    return np.ascontiguousarray(out.transpose(1, 0, 2))


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3:
        raise ShapeError(f"expected an [H, W, C] image, got shape {img.shape}")
    return img


def area_resample(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resample by averaging over overlapping pixel intervals (anti-aliasing)."""
    img = _check_image(img)
    h, w = img.shape[:2]
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"output size must be positive, got {(out_h, out_w)}")
    if (out_h, out_w) == (h, w):
        return img.copy()
    return _apply_separable(img, _area_weights(h, out_h), _area_weights(w, out_w))


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize with 2-tap linear interpolation at half-pixel centers."""
    img = _check_image(img)
    h, w = img.shape[:2]
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"output size must be positive, got {(out_h, out_w)}")
    if (out_h, out_w) == (h, w):
        return img.copy()
    return _apply_separable(img, _bilinear_weights(h, out_h), _bilinear_weights(w, out_w))


# ---------------------------------------------------------------------------
# scale-pair augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentConfig:
    """Knobs for the two-branch scale augmentation."""

    out_size: int = 128
    range_lo: float = 0.2
    range_hi: float = 0.8
    r_high: float = 1.0          # the high branch keeps full scale by default
    base_gsd: float = 1.0        # meters/pixel of the source image
    center_crop: bool = False    # deterministic crops for eval/tests

    def __post_init__(self):
        if self.out_size < 2:
            raise ConfigError(f"out_size must be at least 2, got {self.out_size}")
        if not (0.0 < self.range_lo < self.range_hi <= 1.0):
            raise ConfigError(
                f"scale range must satisfy 0 < lo < hi <= 1, got [{self.range_lo}, {self.range_hi}]"
            )
        if not (0.0 < self.r_high <= 1.0):
            raise ConfigError(f"r_high must be in (0, 1], got {self.r_high}")
        if self.base_gsd <= 0:
            raise ConfigError(f"base_gsd must be positive, got {self.base_gsd}")


@dataclass(frozen=True)
class ScaledPair:
    """Two fixed-size views of one image at scale ratios r_l < r_h."""

    p_h: np.ndarray
    p_l: np.ndarray
    r_h: float
    r_l: float
    g_h: float
    g_l: float

    def __post_init__(self):
        if not (0.0 < self.r_l < self.r_h <= 1.0):
            raise ConfigError(f"scale ratios must satisfy 0 < r_l < r_h <= 1, got r_l={self.r_l}, r_h={self.r_h}")
        if self.p_h.shape != self.p_l.shape:
            raise ShapeError(f"view shapes differ: {self.p_h.shape} vs {self.p_l.shape}")


def sample_scale_pair(rng: np.random.Generator, range_lo: float = 0.2,
                      range_hi: float = 0.8, r_high: float = 1.0) -> tuple[float, float]:
    """Draw (r_h, r_l): fixed high ratio, uniform low ratio, r_l < r_h."""
    if not (0.0 < range_lo < range_hi <= 1.0):
        raise ConfigError(f"scale range must satisfy 0 < lo < hi <= 1, got [{range_lo}, {range_hi}]")
    if not (0.0 < r_high <= 1.0):
        raise ConfigError(f"r_high must be in (0, 1], got {r_high}")
    if range_hi > r_high:
        raise ConfigError(f"range_hi={range_hi} exceeds the fixed high ratio r_high={r_high}")
    r_l = float(rng.uniform(range_lo, range_hi))
    if r_l >= r_high:  # boundary draw when range_hi == r_high
        r_l = float(np.nextafter(r_high, 0.0))
    return r_high, r_l


def scale_augment(img: np.ndarray, r: float, out_size: int,
                  rng: np.random.Generator | None = None,
                  center_crop: bool = False) -> np.ndarray:
    """One scaled view: crop a ratio-r window, area-resample, resize to out_size.

    r=1 with the image already at out_size is the exact identity. Constant
    images stay constant and output values stay inside the input range for
    any r, because every resampling row is a convex combination.
    """
    img = _check_image(img)
    if not (0.0 < r <= 1.0):
        raise ConfigError(f"scale ratio must be in (0, 1], got {r}")
    h0, w0 = img.shape[:2]
    crop_h, crop_w = int(round(r * h0)), int(round(r * w0))
    if min(crop_h, crop_w) < 2:
        raise DegenerateInputError(
            f"scale ratio {r} shrinks a {h0}x{w0} image below 2 px ({crop_h}x{crop_w})"
        )
    if (crop_h, crop_w) == (h0, w0) and (h0, w0) == (out_size, out_size):
        return img.copy()
    if crop_h < h0 or crop_w < w0:
        if center_crop or rng is None:
            top, left = (h0 - crop_h) // 2, (w0 - crop_w) // 2
        else:
            top = int(rng.integers(0, h0 - crop_h + 1))
            left = int(rng.integers(0, w0 - crop_w + 1))
        img = img[top:top + crop_h, left:left + crop_w]
    img = area_resample(img, crop_h, crop_w)
    return bilinear_resize(img, out_size, out_size)


def make_scaled_pair(img: np.ndarray, rng: np.random.Generator,
                     config: AugmentConfig) -> ScaledPair:
    """Draw a ratio pair and build both views with GSD bookkeeping."""
    r_h, r_l = sample_scale_pair(rng, config.range_lo, config.range_hi, config.r_high)
    p_h = scale_augment(img, r_h, config.out_size, rng, config.center_crop)
    p_l = scale_augment(img, r_l, config.out_size, rng, config.center_crop)
    return ScaledPair(p_h=p_h, p_l=p_l, r_h=r_h, r_l=r_l,
                      g_h=config.base_gsd / r_h, g_l=config.base_gsd / r_l)


# ---------------------------------------------------------------------------
# synthetic texture dataset
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticDatasetSpec:
    """Four-class oriented-texture dataset; labels survive rescaling.

    Classes are stripe orientations 0°, 45°, 90°, 135°. Everything else —
    frequency, phase, contrast, brightness, tint, pixel noise — varies per
    image, so raw-intensity statistics carry almost no label information
    and a classifier has to read orientation.
    """

    num_classes: int = 4
    images_per_class: int = 64
    image_size: int = 32
    channels: int = 1
    seed: int = 0
    freq_lo: float = 2.0         # dominant band, cycles per image
    freq_hi: float = 10.0
    orientation_jitter: float = 0.25  # radians around each class direction
    noise_std: float = 0.15
    amplitude_lo: float = 0.12        # stripe contrast range
    amplitude_hi: float = 0.30
    brightness_jitter: float = 0.1    # per-image offset around mid-gray
    bias_amplitude: float = 0.15      # smooth 1-cycle shading field, no label info

    def __post_init__(self):
        if self.num_classes != 4:
            raise ConfigError(f"the texture generator defines exactly 4 classes, got {self.num_classes}")
        if self.images_per_class < 1 or self.image_size < 8 or self.channels < 1:
            raise ConfigError("images_per_class >= 1, image_size >= 8, channels >= 1 required")
        if not (0 < self.freq_lo < self.freq_hi < self.image_size / 2):
            raise ConfigError(f"frequency band [{self.freq_lo}, {self.freq_hi}] must sit below Nyquist")
        if not (0.0 < self.amplitude_lo <= self.amplitude_hi):
            raise ConfigError(f"amplitude range [{self.amplitude_lo}, {self.amplitude_hi}] must be positive and ordered")


# class index -> stripe direction (radians)
_CLASS_ANGLES = (0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4)


def _stripe_image(size: int, angle: float, freq: float, phase: float,
                  amplitude: float, offset: float,
                  rng: np.random.Generator, noise_std: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    t = (xx * np.cos(angle) + yy * np.sin(angle)) / size
    img = offset + amplitude * np.sin(2 * np.pi * freq * t + phase)
    return img + rng.normal(0.0, noise_std, size=img.shape)


def _bias_field(size: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    # smooth shading with a random direction: prominent to raw-intensity
    # statistics but carrying no class information
    angle = rng.uniform(0, np.pi)
    strength = rng.uniform(0.0, amplitude)
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    t = (xx * np.cos(angle) + yy * np.sin(angle)) / size
    return strength * np.sin(2 * np.pi * t + rng.uniform(0, 2 * np.pi))


def generate_synthetic_dataset(spec: SyntheticDatasetSpec,
                               verify: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Build (images [N,H,W,C] float32 in [0,1], labels [N] int64).

    Deterministic for a given spec. With verify=True a linear probe on
    spectral features must separate the classes, otherwise generation
    aborts with an oracle failure.
    """
    rng = np.random.default_rng(spec.seed)
    n = spec.num_classes * spec.images_per_class
    images = np.empty((n, spec.image_size, spec.image_size, spec.channels), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for cls, angle in enumerate(_CLASS_ANGLES):
        for _ in range(spec.images_per_class):
            freq = rng.uniform(spec.freq_lo, spec.freq_hi)
            jitter = rng.uniform(-spec.orientation_jitter, spec.orientation_jitter)
            amplitude = rng.uniform(spec.amplitude_lo, spec.amplitude_hi)
            offset = 0.5 + rng.uniform(-spec.brightness_jitter, spec.brightness_jitter)
            base = _stripe_image(spec.image_size, angle + jitter, freq,
                                 rng.uniform(0, 2 * np.pi), amplitude, offset,
                                 rng, spec.noise_std)
            base = base + _bias_field(spec.image_size, spec.bias_amplitude, rng)
            tint = rng.uniform(0.75, 1.0, size=spec.channels)
            img = np.clip(base[:, :, None] * tint[None, None, :], 0.0, 1.0)
            images[i] = img.astype(np.float32)
            labels[i] = cls
            i += 1
    perm = rng.permutation(n)
    images, labels = images[perm], labels[perm]
    if verify:
        verify_dataset(images, labels)
    return images, labels


# ---------------------------------------------------------------------------
# spectral oracle features and linear probe
# ---------------------------------------------------------------------------

def orientation_energy_features(images: np.ndarray, bins: int = 8,
                                freq_lo: float = 1.0, freq_hi: float = 12.0) -> np.ndarray:
    """Per-image orientation histogram of FFT energy in a frequency annulus.

    The histogram is normalized to sum to 1, which makes it insensitive to
    contrast and brightness; orientation is preserved by aspect-preserving
    crops and resizes, so the features are scale-robust by construction.
    The annulus floor sits at half the generator's lowest stripe frequency:
    a half-scale view halves apparent frequency, and the classifier must
    still see that energy for its label to survive rescaling.
    """
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ShapeError(f"expected [N, H, W, C] images, got shape {images.shape}")
    gray = images.mean(axis=-1)
    n, h, w = gray.shape
    fy = np.fft.fftfreq(h)[:, None] * h
    fx = np.fft.fftfreq(w)[None, :] * w
    rho = np.hypot(fy, fx)
    annulus = (rho >= freq_lo) & (rho <= freq_hi)
    theta = np.mod(np.arctan2(fy, fx), np.pi)
    bin_idx = np.minimum((theta / np.pi * bins).astype(int), bins - 1)
    power = np.abs(np.fft.fft2(gray - gray.mean(axis=(1, 2), keepdims=True))) ** 2
    feats = np.zeros((n, bins))
    for b in range(bins):
        mask = annulus & (bin_idx == b)
        feats[:, b] = power[:, mask].sum(axis=1)
    total = feats.sum(axis=1, keepdims=True)
    total[total == 0] = 1.0
    return feats / total


def _ridge_fit(features: np.ndarray, labels: np.ndarray, lam: float = 1e-3) -> np.ndarray:
    phi = np.concatenate([features, np.ones((features.shape[0], 1))], axis=1)
    k = int(labels.max()) + 1
    onehot = np.eye(k)[labels]
    gram = phi.T @ phi + lam * np.eye(phi.shape[1])
    return np.linalg.solve(gram, phi.T @ onehot)


def _ridge_predict(weights: np.ndarray, features: np.ndarray) -> np.ndarray:
    phi = np.concatenate([features, np.ones((features.shape[0], 1))], axis=1)
    return (phi @ weights).argmax(axis=1)


def linear_probe_accuracy(features: np.ndarray, labels: np.ndarray) -> float:
    """Train accuracy of a one-vs-rest ridge classifier on the features."""
    w = _ridge_fit(features, labels)
    return float((_ridge_predict(w, features) == labels).mean())


def verify_dataset(images: np.ndarray, labels: np.ndarray,
                   min_separability: float = 0.9,
                   min_scale_robustness: float = 0.95) -> None:
    """Assert the class structure is real and survives rescaling.

    Two checks: (1) a linear probe on spectral features separates the
    classes on the original images; (2) the probe gives the same label to
    a half-scale augmented copy for almost all images.
    """
    feats = orientation_energy_features(images)
    acc = linear_probe_accuracy(feats, labels)
    if acc < min_separability:
        raise OracleError(f"classes not separable by spectral features: probe accuracy {acc:.3f}")
    w = _ridge_fit(feats, labels)
    base_pred = _ridge_predict(w, feats)
    out_size = images.shape[1]
    scaled = np.stack([scale_augment(img, 0.5, out_size, center_crop=True) for img in images])
    scaled_pred = _ridge_predict(w, orientation_energy_features(scaled))
    agree = float((scaled_pred == base_pred).mean())
    if agree < min_scale_robustness:
        raise OracleError(f"class identity not scale-robust: agreement {agree:.3f} at half scale")
