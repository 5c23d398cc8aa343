"""Colour-space image transforms and the self-supervised colour-bin label extractor.

All operations act on 8-bit RGB images (H, W, 3) and never touch segmentation
masks. `extract_bias_labels` always reads raw pixel values - the bias target
must be computed before any normalisation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

# ITU-R BT.601 luma weights.
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def _check_rgb8(image) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) RGB image, got shape {image.shape}")
    if image.dtype != np.uint8:
        raise ValueError(f"expected an 8-bit image, got dtype {image.dtype}")
    return image


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def to_greyscale(image) -> np.ndarray:
    """BT.601 luma greyscale; all three output channels carry round(0.299R + 0.587G + 0.114B)."""
    image = _check_rgb8(image)
    r, g, b = LUMA_WEIGHTS
    luma = r * image[..., 0] + g * image[..., 1] + b * image[..., 2]
    luma = _round_half_up(luma).astype(np.uint8)
    return np.stack([luma, luma, luma], axis=-1)


def invert(image) -> np.ndarray:
    """Per-channel colour inversion v -> 255 - v (an involution)."""
    image = _check_rgb8(image)
    return (255 - image.astype(np.int16)).astype(np.uint8)


@dataclass(frozen=True)
class JitterParams:
    """Closed sampling intervals for the four jitter sub-transforms.

    Factors are multiplicative; hue shift is in degrees. Every interval must
    contain its identity value (factor 1, shift 0) so the transform family
    always includes the identity.
    """

    brightness: tuple[float, float] = (0.6, 1.4)
    contrast: tuple[float, float] = (0.6, 1.4)
    saturation: tuple[float, float] = (0.6, 1.4)
    hue_degrees: tuple[float, float] = (-18.0, 18.0)

    def __post_init__(self):
        for name, (lo, hi), identity in (
            ("brightness", self.brightness, 1.0),
            ("contrast", self.contrast, 1.0),
            ("saturation", self.saturation, 1.0),
            ("hue_degrees", self.hue_degrees, 0.0),
        ):
            if lo > hi:
                raise ValueError(f"{name} interval ({lo}, {hi}) is empty")
            if not (lo <= identity <= hi):
                raise ValueError(f"{name} interval ({lo}, {hi}) must contain {identity}")


def _luma(arr: np.ndarray) -> np.ndarray:
    r, g, b = LUMA_WEIGHTS
    return r * arr[..., 0] + g * arr[..., 1] + b * arr[..., 2]


def colour_jitter(image, params: JitterParams, seed: int) -> np.ndarray:
    """Random brightness -> contrast -> saturation -> hue, in that fixed order.

    One factor per sub-transform is drawn uniformly from its interval using
    `seed`; sub-transforms whose draw lands exactly on the identity are
    skipped, so collapsing every interval to the identity returns the input
    bit-exactly. Output is clamped to [0, 255].
    """
    rng = np.random.default_rng(seed)
    b = float(rng.uniform(*params.brightness))
    c = float(rng.uniform(*params.contrast))
    s = float(rng.uniform(*params.saturation))
    h = float(rng.uniform(*params.hue_degrees))
    return apply_jitter_factors(image, brightness=b, contrast=c, saturation=s, hue_degrees=h)


def apply_jitter_factors(
    image,
    brightness: float = 1.0,
    contrast: float = 1.0,
    saturation: float = 1.0,
    hue_degrees: float = 0.0,
) -> np.ndarray:
    """Deterministic jitter core with explicit factors (fixed application order)."""
    image = _check_rgb8(image)
    b, c, s, h = float(brightness), float(contrast), float(saturation), float(hue_degrees)
    if b == 1.0 and c == 1.0 and s == 1.0 and h == 0.0:
        return image.copy()

    arr = image.astype(np.float64)
    if b != 1.0:
        arr = arr * b
    if c != 1.0:
        grey_mean = _luma(arr).mean()
        arr = (arr - grey_mean) * c + grey_mean
    if s != 1.0:
        grey = _luma(arr)[..., None]
        arr = (arr - grey) * s + grey
    if h != 0.0:
        hsv = rgb_to_hsv(np.clip(arr, 0.0, 255.0) / 255.0)
        hsv[..., 0] = (hsv[..., 0] + h / 360.0) % 1.0
        arr = hsv_to_rgb(hsv) * 255.0
    return _round_half_up(np.clip(arr, 0.0, 255.0)).astype(np.uint8)


@dataclass(frozen=True)
class BiasLabelSpec:
    """Uniform per-channel RGB quantisation producing B^3 colour-bin classes."""

    bins_per_channel: int = 4

    def __post_init__(self):
        if self.bins_per_channel < 2:
            raise ValueError("bins_per_channel must be >= 2")

    @property
    def num_bias_classes(self) -> int:
        return self.bins_per_channel ** 3


def extract_bias_labels(image, spec: BiasLabelSpec) -> np.ndarray:
    """Self-supervised per-pixel colour label: flattened index of the RGB bin triple.

    bin_c = min(floor(v_c * B / 256), B - 1), label = bin_R * B^2 + bin_G * B + bin_B.
    Total and deterministic; reads raw (un-normalised) pixel values.
    """
    image = _check_rgb8(image)
    b = spec.bins_per_channel
    bins = np.minimum(image.astype(np.int64) * b // 256, b - 1)
    return bins[..., 0] * b * b + bins[..., 1] * b + bins[..., 2]


def normalize(image, mean, std) -> np.ndarray:
    """Map 8-bit RGB to float32 channels: (v / 255 - mean_c) / std_c."""
    image = _check_rgb8(image)
    mean = np.asarray(mean, dtype=np.float32).reshape(1, 1, 3)
    std = np.asarray(std, dtype=np.float32).reshape(1, 1, 3)
    if (std <= 0).any():
        raise ValueError("std components must be > 0")
    return (image.astype(np.float32) / 255.0 - mean) / std
