"""Confusion-matrix IoU metrics, category aggregation and relative percent change.

The confusion matrix is the single sufficient statistic: every IoU figure
(per class, mean, per category) is derived from it, and per-batch matrices
merge associatively so evaluation can be parallelised.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

CATEGORY_NAMES = ("flat", "construction", "object", "nature", "sky", "human", "vehicle")

# Cityscapes 19-class -> 7-category grouping.
CITYSCAPES_CATEGORY_MAP = {
    0: "flat", 1: "flat",
    2: "construction", 3: "construction", 4: "construction",
    5: "object", 6: "object", 7: "object",
    8: "nature", 9: "nature",
    10: "sky",
    11: "human", 12: "human",
    13: "vehicle", 14: "vehicle", 15: "vehicle", 16: "vehicle", 17: "vehicle", 18: "vehicle",
}

REPORT_SCHEMA_VERSION = 1


class ConfusionMatrix:
    """C x C pixel-count accumulator. Rows are ground truth, columns prediction."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        if num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {num_classes}")
        self.num_classes = num_classes
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        else:
            counts = np.asarray(counts, dtype=np.int64)
            if counts.shape != (num_classes, num_classes):
                raise ValueError(f"counts shape {counts.shape} != ({num_classes}, {num_classes})")
            if (counts < 0).any():
                raise ValueError("confusion counts must be non-negative")
        self.counts = counts

    def total_pixels(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        """Associative, commutative merge of two accumulators."""
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts.copy())


def confusion_accumulate(cm: ConfusionMatrix, pred_mask, gt_mask, ignore_id: int = 255) -> ConfusionMatrix:
    """Add one (prediction, ground truth) mask pair into `cm` in place.

    Pixels whose ground truth equals `ignore_id` are skipped entirely.
    """
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ValueError(f"pred shape {pred.shape} != gt shape {gt.shape}")
    c = cm.num_classes
    valid = gt != ignore_id
    pred = pred[valid].astype(np.int64)
    gt = gt[valid].astype(np.int64)
    if pred.size:
        if pred.min() < 0 or pred.max() >= c:
            raise ValueError(f"prediction values outside [0, {c})")
        if gt.min() < 0 or gt.max() >= c:
            raise ValueError(f"ground-truth values outside [0, {c}) after ignore filtering")
        cm.counts += np.bincount(gt * c + pred, minlength=c * c).reshape(c, c)
    return cm


def iou_per_class(cm: ConfusionMatrix) -> np.ndarray:
    """IoU_c = TP_c / (gt_c + pred_c - TP_c); NaN where the class never occurs."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    union = counts.sum(axis=1) + counts.sum(axis=0) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    return iou


def mean_iou(cm: ConfusionMatrix) -> float:
    """Arithmetic mean of the defined per-class IoUs."""
    iou = iou_per_class(cm)
    defined = ~np.isnan(iou)
    if not defined.any():
        raise ValueError("mean IoU undefined: no class occurs in ground truth or prediction")
    return float(iou[defined].mean())


def collapse_by_category(cm: ConfusionMatrix, category_map: dict[int, str]) -> tuple[list[str], ConfusionMatrix]:
    """Collapse classes sharing a category by summing confusion rows and columns.

    Category order is first appearance by class ID, which reproduces the
    conventional flat/construction/object/nature/sky/human/vehicle layout.
    """
    missing = [c for c in range(cm.num_classes) if c not in category_map]
    if missing:
        raise ValueError(f"category map missing class IDs: {missing}")
    names: list[str] = []
    for c in range(cm.num_classes):
        if category_map[c] not in names:
            names.append(category_map[c])
    index = np.array([names.index(category_map[c]) for c in range(cm.num_classes)])
    k = len(names)
    onehot = np.zeros((cm.num_classes, k), dtype=np.int64)
    onehot[np.arange(cm.num_classes), index] = 1
    collapsed = onehot.T @ cm.counts @ onehot
    return names, ConfusionMatrix(k, collapsed)


def category_iou(cm: ConfusionMatrix, category_map: dict[int, str]) -> tuple[list[str], np.ndarray]:
    """Per-category IoU from the merged confusion matrix (not a mean of members)."""
    names, collapsed = collapse_by_category(cm, category_map)
    return names, iou_per_class(collapsed)


def percent_change(baseline: float, ours: float) -> float:
    """Relative percentage increase from `baseline` to `ours`.

    This is the reporting convention used throughout: +61.18 means ours is
    61.18% larger than the baseline, not 61.18 points larger.
    """
    if baseline == 0:
        raise ValueError("percent change undefined for a zero baseline")
    return 100.0 * (ours - baseline) / baseline


def _none_if_nan(x: float) -> float | None:
    return None if (x is None or (isinstance(x, float) and math.isnan(x))) else float(x)


@dataclass
class MetricsReport:
    """Evaluation result for one checkpoint on one dataset variant."""

    num_classes: int
    class_names: list[str]
    per_class_iou: list[float | None]
    miou: float
    loss: float | None = None
    category_names: list[str] | None = None
    per_category_iou: list[float | None] | None = None
    category_average: float | None = None
    excluded_classes: list[int] = field(default_factory=list)
    comparisons: list[dict] = field(default_factory=list)
    variant: str = "rgb"
    scheme: str = "baseline"
    checkpoint: str | None = None
    dataset: str | None = None

    @classmethod
    def from_confusion(
        cls,
        cm: ConfusionMatrix,
        class_names: list[str],
        category_map: dict[int, str] | None = None,
        loss: float | None = None,
        variant: str = "rgb",
        scheme: str = "baseline",
        checkpoint: str | None = None,
        dataset: str | None = None,
    ) -> "MetricsReport":
        if len(class_names) != cm.num_classes:
            raise ValueError("class_names length must equal the confusion matrix size")
        iou = iou_per_class(cm)
        excluded = [int(c) for c in np.flatnonzero(np.isnan(iou))]
        cat_names = cat_iou = cat_avg = None
        if category_map is not None:
            cat_names, raw = category_iou(cm, category_map)
            cat_iou = [_none_if_nan(v) for v in raw]
            defined = [v for v in cat_iou if v is not None]
            cat_avg = float(np.mean(defined)) if defined else None
        return cls(
            num_classes=cm.num_classes,
            class_names=list(class_names),
            per_class_iou=[_none_if_nan(v) for v in iou],
            miou=mean_iou(cm),
            loss=loss,
            category_names=cat_names,
            per_category_iou=cat_iou,
            category_average=cat_avg,
            excluded_classes=excluded,
            variant=variant,
            scheme=scheme,
            checkpoint=checkpoint,
            dataset=dataset,
        )

    def to_dict(self) -> dict:
        return {
            "schema_version": REPORT_SCHEMA_VERSION,
            "variant": self.variant,
            "scheme": self.scheme,
            "checkpoint": self.checkpoint,
            "dataset": self.dataset,
            "num_classes": self.num_classes,
            "class_names": self.class_names,
            "per_class_iou": self.per_class_iou,
            "miou": self.miou,
            "loss": self.loss,
            "category_names": self.category_names,
            "per_category_iou": self.per_category_iou,
            "category_average": self.category_average,
            "excluded_classes": self.excluded_classes,
            "comparisons": self.comparisons,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        version = d.get("schema_version")
        if version != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema_version: {version}")
        return cls(
            num_classes=d["num_classes"],
            class_names=d["class_names"],
            per_class_iou=d["per_class_iou"],
            miou=d["miou"],
            loss=d.get("loss"),
            category_names=d.get("category_names"),
            per_category_iou=d.get("per_category_iou"),
            category_average=d.get("category_average"),
            excluded_classes=d.get("excluded_classes", []),
            comparisons=d.get("comparisons", []),
            variant=d.get("variant", "rgb"),
            scheme=d.get("scheme", "baseline"),
            checkpoint=d.get("checkpoint"),
            dataset=d.get("dataset"),
        )

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))

    def to_markdown(self) -> str:
        """Single-report table: per-class IoU plus the category block if present."""

        def fmt(v):
            return "n/a" if v is None else f"{100.0 * v:.2f}"

        lines = [
            f"### {self.scheme} / {self.variant}",
            "",
            f"mIoU: **{100.0 * self.miou:.2f}%**"
            + (f", loss: {self.loss:.4f}" if self.loss is not None else ""),
            "",
            "| Class | IoU (%) |",
            "| --- | --- |",
        ]
        for name, v in zip(self.class_names, self.per_class_iou):
            lines.append(f"| {name} | {fmt(v)} |")
        if self.category_names:
            lines += ["", "| Category | IoU (%) |", "| --- | --- |"]
            for name, v in zip(self.category_names, self.per_category_iou):
                lines.append(f"| {name} | {fmt(v)} |")
            lines.append(f"| *Average* | {fmt(self.category_average)} |")
        if self.excluded_classes:
            names = ", ".join(self.class_names[c] for c in self.excluded_classes)
            lines += ["", f"Classes excluded from the mean (never observed): {names}"]
        return "\n".join(lines) + "\n"
