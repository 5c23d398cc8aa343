"""Checkpoint evaluation: batched inference into a confusion matrix and a MetricsReport.

The inference side is a plain callable from an image batch to class logits,
so tests can substitute an oracle double for a trained checkpoint.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .datasets import Sample
from .metrics import ConfusionMatrix, MetricsReport, confusion_accumulate, iou_per_class
from .model import SegmentationModel
from .transforms import normalize

LogitsFn = Callable[[np.ndarray], np.ndarray]  # (n, H, W, 3) uint8 -> (n, C, H, W) float


@dataclass
class EvalOutcome:
    cm: ConfusionMatrix
    loss: float
    per_image_miou: list[float]  # NaN where an image has no evaluated pixels


def checkpoint_logits_fn(
    model: SegmentationModel,
    mean,
    std,
    device: str = "cpu",
) -> LogitsFn:
    dev = torch.device(device)
    model = model.to(dev).eval()

    def run(images: np.ndarray) -> np.ndarray:
        arr = np.stack([normalize(img, mean, std) for img in images]).transpose(0, 3, 1, 2)
        with torch.no_grad():
            logits = model(torch.from_numpy(arr.copy()).to(dev))
        return logits.cpu().numpy()

    return run


def oracle_logits_fn(samples: list[Sample], num_classes: int, ignore_id: int = 255) -> LogitsFn:
    """Test double emitting near-one-hot logits for the ground-truth mask."""
    by_key = {s.image.tobytes(): s.mask for s in samples}

    def run(images: np.ndarray) -> np.ndarray:
        out = np.zeros((len(images), num_classes, *images.shape[1:3]), dtype=np.float32)
        for i, img in enumerate(images):
            gt = by_key[img.tobytes()]
            hot = np.where(gt == ignore_id, 0, gt)
            out[i, hot, np.arange(gt.shape[0])[:, None], np.arange(gt.shape[1])[None, :]] = 1000.0
        return out

    return run


def evaluate_samples(
    logits_fn: LogitsFn,
    samples: list[Sample],
    num_classes: int,
    ignore_id: int = 255,
    batch_size: int = 16,
) -> EvalOutcome:
    """Run inference over `samples`, accumulating the confusion matrix and mean pixel CE."""
    cm = ConfusionMatrix(num_classes)
    loss_sum = 0.0
    loss_pixels = 0
    per_image_miou: list[float] = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images = np.stack([s.image for s in chunk])
        logits = logits_fn(images)
        if logits.shape[1] != num_classes:
            raise ValueError(
                f"model emits {logits.shape[1]} classes but the dataset declares {num_classes}"
            )
        preds = logits.argmax(axis=1)
        for sample, pred, lg in zip(chunk, preds, logits):
            image_cm = ConfusionMatrix(num_classes)
            confusion_accumulate(image_cm, pred, sample.mask, ignore_id)
            cm = cm.merge(image_cm)
            iou = iou_per_class(image_cm)
            defined = ~np.isnan(iou)
            per_image_miou.append(float(iou[defined].mean()) if defined.any() else float("nan"))

            valid = sample.mask != ignore_id
            if valid.any():
                t = torch.from_numpy(lg[None].astype(np.float64))
                logp = torch.log_softmax(t, dim=1)[0].numpy()
                targets = np.where(valid, sample.mask, 0)
                picked = np.take_along_axis(logp, targets[None], axis=0)[0]
                loss_sum += float(-(picked[valid]).sum())
                loss_pixels += int(valid.sum())
    if loss_pixels == 0:
        raise ValueError("dataset contains no non-ignored pixels")
    return EvalOutcome(cm=cm, loss=loss_sum / loss_pixels, per_image_miou=per_image_miou)


def build_report(
    outcome: EvalOutcome,
    class_names: list[str],
    category_map: dict[int, str] | None,
    variant: str,
    scheme: str,
    checkpoint: str | None = None,
    dataset: str | None = None,
) -> MetricsReport:
    return MetricsReport.from_confusion(
        outcome.cm,
        class_names=class_names,
        category_map=category_map,
        loss=outcome.loss,
        variant=variant,
        scheme=scheme,
        checkpoint=checkpoint,
        dataset=dataset,
    )


def worst_image_indices(outcome: EvalOutcome, n: int) -> list[int]:
    """Indices of the n worst images by per-image mIoU (NaN images excluded)."""
    scored = [(m, i) for i, m in enumerate(outcome.per_image_miou) if not np.isnan(m)]
    scored.sort()
    return [i for _, i in scored[:n]]
