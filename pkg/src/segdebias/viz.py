"""Prediction overlays and loss-curve plots."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.colors import hsv_to_rgb

# Official Cityscapes train-class colours.
CITYSCAPES_PALETTE = np.array(
    [
        (128, 64, 128), (244, 35, 232), (70, 70, 70), (102, 102, 156), (190, 153, 153),
        (153, 153, 153), (250, 170, 30), (220, 220, 0), (107, 142, 35), (152, 251, 152),
        (70, 130, 180), (220, 20, 60), (255, 0, 0), (0, 0, 142), (0, 0, 70),
        (0, 60, 100), (0, 80, 100), (0, 0, 230), (119, 11, 32),
    ],
    dtype=np.uint8,
)

OVERLAY_ALPHA = 0.5


def class_palette(num_classes: int) -> np.ndarray:
    """Fixed (C, 3) uint8 palette: Cityscapes colours for C=19, evenly spaced hues otherwise."""
    if num_classes == len(CITYSCAPES_PALETTE):
        return CITYSCAPES_PALETTE.copy()
    hues = np.arange(num_classes) / num_classes
    hsv = np.stack([hues, np.full(num_classes, 0.85), np.full(num_classes, 0.9)], axis=-1)
    return (hsv_to_rgb(hsv) * 255).round().astype(np.uint8)


def overlay_prediction(
    image: np.ndarray,
    pred_mask: np.ndarray,
    palette: np.ndarray | None = None,
    alpha: float = OVERLAY_ALPHA,
    rois: list[tuple[int, int, int, int]] | None = None,
) -> np.ndarray:
    """Blend the colour-coded predicted mask over the input at fixed alpha.

    `rois` are optional (y0, x0, y1, x1) region-of-interest rectangles drawn
    as 1px white outlines.
    """
    if image.shape[:2] != pred_mask.shape:
        raise ValueError("image and prediction sizes differ")
    if palette is None:
        palette = class_palette(int(pred_mask.max()) + 1)
    if int(pred_mask.max()) >= len(palette):
        raise ValueError("palette has no colour for some predicted class")
    colours = palette[pred_mask]
    out = ((1 - alpha) * image.astype(np.float64) + alpha * colours).round().astype(np.uint8)
    for y0, x0, y1, x1 in rois or []:
        out[y0:y1 + 1, [x0, x1]] = 255
        out[[y0, y1], x0:x1 + 1] = 255
    return out


def _style_for(label: str) -> str:
    # Fig. 6 convention: invert dashed, jitter dotted, everything else solid.
    lowered = label.lower()
    if "invert" in lowered:
        return "--"
    if "jitter" in lowered:
        return ":"
    return "-"


def plot_loss_curves(curves: list[tuple[str, list[int], list[float]]], out_path, title: str = "") -> Path:
    """Write a static PNG of loss-over-epoch curves.

    `curves` is a list of (label, epochs, values); line style follows the
    label (invert dashed, jitter dotted).
    """
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, epochs, values in curves:
        ax.plot(epochs, values, _style_for(label), label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
