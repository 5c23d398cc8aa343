"""Class-weighted losses, the step learning-rate schedule and the two training regimes.

`baseline` trains f.g alone on weighted pixel cross-entropy. `lntl` runs a
warm-up identical to the baseline (bias head frozen, its loss logged but
unused), then switches to joint single-step updates in which the bias branch
passes through the gradient reversal: h descends the true colour gradient,
f receives the segmentation gradient minus lambda*mu times the colour
gradient, and g sees only the segmentation gradient.
"""

from __future__ import annotations

import csv
import json
import time
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .datasets import (
    IGNORE_ID,
    DatasetSpec,
    Sample,
    adapt_cityscapes,
    cityscapes_spec,
    load_folder_dataset,
    spec_from_manifest,
    temporal_split,
)
from .model import BackboneSpec, fork_at, load_checkpoint, save_checkpoint
from .transforms import BiasLabelSpec, extract_bias_labels, normalize

RUN_SCHEMA_VERSION = 1

DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.5, 0.5, 0.5)


@dataclass
class DatasetConfig:
    """Which data a run trains on.

    `folder` format expects a manifest.json at `root`; `cityscapes` expects
    the published leftImg8bit/gtFine layout. When `temporal_split_fraction`
    is set, only `train_split` is loaded and split order-preservingly into
    train/val (the id order standing in for time).
    """

    format: str = "folder"
    root: str = ""
    train_split: str = "train"
    val_split: str = "val"
    temporal_split_fraction: float | None = None

    def validate(self):
        if self.format not in ("folder", "cityscapes"):
            raise ValueError(f"unknown dataset format: {self.format!r}")
        if not self.root:
            raise ValueError("dataset.root is required")


@dataclass
class TrainConfig:
    scheme: str = "baseline"  # baseline | lntl
    epochs: int = 100
    base_lr: float = 0.001
    lr_step: int = 40
    lr_gamma: float = 0.1
    warmup_epochs: int = 5
    grl_scale: float = 1.0
    grl_ramp: bool = False
    bias_loss_weight: float = 1.0
    batch_size: int = 16
    seed: int = 0
    bias_bins: int = 4
    width: int = 32
    depth: int = 3
    fork_index: int | None = None
    normalize_mean: tuple[float, float, float] = DEFAULT_MEAN
    normalize_std: tuple[float, float, float] = DEFAULT_STD
    device: str = "cpu"
    out_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)

    def validate(self):
        if self.scheme not in ("baseline", "lntl"):
            raise ValueError(f"unknown scheme: {self.scheme!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if not 0 < self.lr_gamma <= 1:
            raise ValueError("lr_gamma must be in (0, 1]")
        if self.lr_step < 1:
            raise ValueError("lr_step must be >= 1")
        if self.grl_scale < 0 or self.bias_loss_weight < 0:
            raise ValueError("grl_scale and bias_loss_weight must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.bias_bins < 2:
            raise ValueError("bias_bins must be >= 2")
        self.dataset.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["normalize_mean"] = list(self.normalize_mean)
        d["normalize_std"] = list(self.normalize_std)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        ds = d.pop("dataset", {})
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        ds_known = {f.name for f in DatasetConfig.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        ds_unknown = set(ds) - ds_known
        if ds_unknown:
            raise ValueError(f"unknown dataset config keys: {sorted(ds_unknown)}")
        for key in ("normalize_mean", "normalize_std"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(dataset=DatasetConfig(**ds), **d)


@dataclass
class ClassWeights:
    """Inverse-frequency class weights, normalised so the mean weight is 1."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if (self.weights <= 0).any():
            raise ValueError("all class weights must be > 0")
        if abs(self.weights.mean() - 1.0) > 1e-9:
            raise ValueError(f"class weights must have mean 1, got {self.weights.mean()}")


def compute_class_weights(samples, num_classes: int, ignore_id: int = IGNORE_ID) -> ClassWeights:
    """weight_c proportional to 1 / pixel frequency of c over all masks, mean-normalised.

    Classes with zero pixels get the maximum computed weight (with a warning)
    so rare classes never crash training.
    """
    counts = np.zeros(num_classes, dtype=np.int64)
    for item in samples:
        mask = item.mask if isinstance(item, Sample) else np.asarray(item)
        valid = mask[mask != ignore_id]
        counts += np.bincount(valid.reshape(-1), minlength=num_classes)[:num_classes]
    total = counts.sum()
    if total == 0:
        raise ValueError("no non-ignored pixels found in any mask")
    present = counts > 0
    inv = np.zeros(num_classes, dtype=np.float64)
    inv[present] = total / counts[present]
    if not present.all():
        missing = np.flatnonzero(~present).tolist()
        warnings.warn(
            f"classes {missing} have zero pixels; assigning them the maximum computed weight",
            stacklevel=2,
        )
        inv[~present] = inv[present].max()
    return ClassWeights(inv / inv.mean())


def weighted_pixel_ce(logits, targets, weights, ignore_id: int = IGNORE_ID) -> torch.Tensor:
    """Mean over non-ignored pixels of weight[target] * (-log softmax(logits)[target]).

    Note the divisor is the non-ignored pixel count, not the weight sum.
    Ignored pixels contribute nothing to the value or the gradient.
    """
    if logits.ndim != 4:
        raise ValueError(f"expected (n, C, H, W) logits, got shape {tuple(logits.shape)}")
    if targets.shape != (logits.shape[0], *logits.shape[2:]):
        raise ValueError(
            f"targets shape {tuple(targets.shape)} does not match logits {tuple(logits.shape)}"
        )
    if isinstance(weights, ClassWeights):
        weights = weights.weights
    w = torch.as_tensor(np.asarray(weights), dtype=logits.dtype, device=logits.device)
    if w.shape != (logits.shape[1],):
        raise ValueError(f"need one weight per class, got {tuple(w.shape)}")

    valid = targets != ignore_id
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("all pixels are ignored: the mean pixel loss is undefined")
    safe_targets = targets.masked_fill(~valid, 0).long()
    logp = F.log_softmax(logits, dim=1)
    picked = logp.gather(1, safe_targets.unsqueeze(1)).squeeze(1)
    per_pixel = -picked * w[safe_targets]
    return (per_pixel * valid.to(per_pixel.dtype)).sum() / n_valid


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: base_lr * gamma^floor(epoch / step)."""
    if epoch < 0 or epoch >= cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.base_lr * cfg.lr_gamma ** (epoch // cfg.lr_step)


@dataclass
class EpochLog:
    epoch: int
    train_seg_loss: float
    val_seg_loss: float
    bias_loss: float | None
    lr: float
    wall_time: float


@dataclass
class TrainResult:
    epoch_logs: list[EpochLog]
    best_checkpoint: Path
    final_checkpoint: Path
    best_epoch: int
    best_val_loss: float
    final_val_loss: float
    csv_path: Path
    summary_path: Path
    num_classes: int
    class_weights: ClassWeights


# ---------------------------------------------------------------------------
# Data plumbing
# ---------------------------------------------------------------------------

def load_train_val(cfg: TrainConfig) -> tuple[list[Sample], list[Sample], DatasetSpec]:
    ds = cfg.dataset
    root = Path(ds.root)
    if not root.exists():
        raise FileNotFoundError(f"dataset root does not exist: {root}")
    if ds.format == "cityscapes":
        spec = cityscapes_spec(root, ds.train_split)
        train = adapt_cityscapes(root, ds.train_split)
        if ds.temporal_split_fraction is not None:
            train, val = temporal_split(train, ds.temporal_split_fraction)
        else:
            val = adapt_cityscapes(root, ds.val_split)
        return train, val, spec
    spec = spec_from_manifest(root, ds.train_split)
    train = load_folder_dataset(spec)
    if ds.temporal_split_fraction is not None:
        train, val = temporal_split(train, ds.temporal_split_fraction)
    else:
        val = load_folder_dataset(spec_from_manifest(root, ds.val_split))
    return train, val, spec


def _samples_to_tensors(
    samples: list[Sample],
    cfg: TrainConfig,
    bias_spec: BiasLabelSpec | None,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor | None]:
    images = np.stack([normalize(s.image, cfg.normalize_mean, cfg.normalize_std) for s in samples])
    x = torch.from_numpy(images.transpose(0, 3, 1, 2).copy())
    y = torch.from_numpy(np.stack([s.mask for s in samples]).astype(np.int64))
    b = None
    if bias_spec is not None:
        # bias targets always come from the raw, un-normalised pixels
        b = torch.from_numpy(np.stack([extract_bias_labels(s.image, bias_spec) for s in samples]))
    return x, y, b


def _dataset_seg_loss(model, x, y, weights, ignore_id, batch_size, device) -> float:
    """Exact mean pixel loss over a whole split (batch means re-weighted by pixel count)."""
    model.eval()
    total = 0.0
    pixels = 0
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            xb = x[start : start + batch_size].to(device)
            yb = y[start : start + batch_size].to(device)
            n_valid = int((yb != ignore_id).sum())
            if n_valid == 0:
                continue
            loss = weighted_pixel_ce(model.g(model.f(xb)), yb, weights, ignore_id)
            total += float(loss) * n_valid
            pixels += n_valid
    if pixels == 0:
        raise ValueError("validation split contains no non-ignored pixels")
    return total / pixels


def _grl_scale_at(cfg: TrainConfig, epoch: int) -> float:
    if not cfg.grl_ramp:
        return cfg.grl_scale
    span = max(1, cfg.epochs - cfg.warmup_epochs)
    progress = min(1.0, max(0.0, (epoch - cfg.warmup_epochs + 1) / span))
    return cfg.grl_scale * progress


# ---------------------------------------------------------------------------
# Training regimes
# ---------------------------------------------------------------------------

def train_baseline(cfg: TrainConfig, resume_from=None, quiet: bool = False) -> TrainResult:
    if cfg.scheme != "baseline":
        raise ValueError(f"train_baseline called with scheme={cfg.scheme!r}")
    return _run_training(cfg, resume_from=resume_from, quiet=quiet)


def train_lntl(cfg: TrainConfig, resume_from=None, quiet: bool = False) -> TrainResult:
    if cfg.scheme != "lntl":
        raise ValueError(f"train_lntl called with scheme={cfg.scheme!r}")
    return _run_training(cfg, resume_from=resume_from, quiet=quiet)


def _run_training(cfg: TrainConfig, resume_from=None, quiet: bool = False) -> TrainResult:
    cfg.validate()
    device = torch.device(cfg.device)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lntl = cfg.scheme == "lntl"

    train_samples, val_samples, spec = load_train_val(cfg)
    if not train_samples or not val_samples:
        raise ValueError("train and validation splits must both be non-empty")
    num_classes = spec.num_classes
    ignore_id = spec.ignore_id
    weights = compute_class_weights(train_samples, num_classes, ignore_id)

    bias_spec = BiasLabelSpec(cfg.bias_bins)
    x_train, y_train, b_train = _samples_to_tensors(train_samples, cfg, bias_spec if lntl else None)
    x_val, y_val, _ = _samples_to_tensors(val_samples, cfg, None)

    torch.manual_seed(cfg.seed)
    model = fork_at(
        BackboneSpec(width=cfg.width, depth=cfg.depth),
        cfg.fork_index,
        num_classes=num_classes,
        bias_classes=bias_spec.num_bias_classes,
        grl_scale=cfg.grl_scale,
    ).to(device)

    params = list(model.f.parameters()) + list(model.g.parameters())
    if lntl:
        params += list(model.h.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.base_lr)

    start_epoch = 0
    if resume_from is not None:
        loaded, payload = load_checkpoint(resume_from)
        model.load_state_dict(loaded.state_dict())
        model.to(device)
        if payload["optimizer_state"] is not None:
            optimizer.load_state_dict(payload["optimizer_state"])
        start_epoch = payload["epoch"]
        if start_epoch > cfg.epochs:
            raise ValueError(
                f"checkpoint already at epoch {start_epoch}, beyond requested epochs {cfg.epochs}"
            )

    w_tensor = torch.as_tensor(weights.weights, dtype=torch.float32, device=device)
    best_path = out_dir / "best.pt"
    final_path = out_dir / "final.pt"
    csv_path = out_dir / "epochs.csv"
    summary_path = out_dir / "run_summary.json"

    logs: list[EpochLog] = []
    best_val = float("inf")
    best_epoch = -1
    n_train = len(x_train)

    def save(path, epoch, val_loss):
        save_checkpoint(
            path,
            model,
            optimizer_state=optimizer.state_dict(),
            epoch=epoch,
            train_config=cfg.to_dict(),
            extra={
                "val_seg_loss": val_loss,
                "class_weights": weights.weights.tolist(),
                "ignore_id": ignore_id,
                "class_names": spec.class_names,
                "normalize_mean": list(cfg.normalize_mean),
                "normalize_std": list(cfg.normalize_std),
            },
        )

    for epoch in range(start_epoch, cfg.epochs):
        tic = time.monotonic()
        lr = lr_at(epoch, cfg)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.grl_scale = _grl_scale_at(cfg, epoch)
        adversarial = lntl and epoch >= cfg.warmup_epochs and cfg.bias_loss_weight > 0

        order = np.random.default_rng([cfg.seed, epoch]).permutation(n_train)
        model.train()
        step_losses: list[float] = []
        step_bias_losses: list[float] = []
        for step, start in enumerate(range(0, n_train, cfg.batch_size)):
            idx = torch.from_numpy(order[start : start + cfg.batch_size].copy())
            xb = x_train[idx].to(device)
            yb = y_train[idx].to(device)
            optimizer.zero_grad(set_to_none=True)
            feats = model.f(xb)
            seg_loss = weighted_pixel_ce(model.g(feats), yb, w_tensor, ignore_id)
            total = seg_loss
            if lntl:
                bb = b_train[idx].to(device)
                if adversarial:
                    bias_loss = F.cross_entropy(model.h(model.grl(feats)), bb)
                    total = seg_loss + cfg.bias_loss_weight * bias_loss
                else:
                    # warm-up / mu=0: h stays frozen, bias loss is logged only
                    with torch.no_grad():
                        bias_loss = F.cross_entropy(model.h(feats), bb)
                if not torch.isfinite(bias_loss):
                    raise RuntimeError(
                        f"non-finite bias loss at epoch {epoch}, batch {step}, lr {lr}"
                    )
                step_bias_losses.append(float(bias_loss.detach()))
            if not torch.isfinite(total):
                raise RuntimeError(
                    f"non-finite training loss at epoch {epoch}, batch {step}, lr {lr}"
                )
            total.backward()
            optimizer.step()
            step_losses.append(float(seg_loss.detach()))

        train_loss = float(np.mean(step_losses))
        val_loss = _dataset_seg_loss(model, x_val, y_val, w_tensor, ignore_id, cfg.batch_size, device)
        bias_loss_epoch = float(np.mean(step_bias_losses)) if lntl else None
        logs.append(
            EpochLog(
                epoch=epoch,
                train_seg_loss=train_loss,
                val_seg_loss=val_loss,
                bias_loss=bias_loss_epoch,
                lr=lr,
                wall_time=time.monotonic() - tic,
            )
        )
        if not quiet:
            bias_part = f" bias {bias_loss_epoch:.4f}" if bias_loss_epoch is not None else ""
            print(
                f"[{cfg.scheme}] epoch {epoch:3d} lr {lr:.2e} "
                f"train {train_loss:.4f} val {val_loss:.4f}{bias_part}",
                flush=True,
            )
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            save(best_path, epoch + 1, val_loss)

    if logs:
        final_val = logs[-1].val_seg_loss
    else:
        # resumed with zero further epochs: recompute where the checkpoint left off
        final_val = _dataset_seg_loss(model, x_val, y_val, w_tensor, ignore_id, cfg.batch_size, device)
        if best_epoch < 0:
            best_val = final_val
            best_epoch = start_epoch - 1
    save(final_path, cfg.epochs, final_val)
    if not best_path.exists():
        save(best_path, cfg.epochs, final_val)

    write_epoch_csv(csv_path, logs, lntl)
    summary = {
        "schema_version": RUN_SCHEMA_VERSION,
        "scheme": cfg.scheme,
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "num_classes": num_classes,
        "class_weights": weights.weights.tolist(),
        "best_epoch": best_epoch,
        "best_val_loss": best_val,
        "final_val_loss": final_val,
        "total_wall_time": sum(log.wall_time for log in logs),
        "config": cfg.to_dict(),
    }
    summary_path.write_text(json.dumps(summary, indent=2) + "\n")

    return TrainResult(
        epoch_logs=logs,
        best_checkpoint=best_path,
        final_checkpoint=final_path,
        best_epoch=best_epoch,
        best_val_loss=best_val,
        final_val_loss=final_val,
        csv_path=csv_path,
        summary_path=summary_path,
        num_classes=num_classes,
        class_weights=weights,
    )


def write_epoch_csv(path, logs: list[EpochLog], lntl: bool) -> Path:
    """Per-epoch CSV: epoch, lr and the split losses (plus bias_loss for lntl runs).

    Wall time deliberately stays out of the CSV so reruns with the same seed
    produce byte-identical files.
    """
    path = Path(path)
    headers = ["epoch", "lr", "train_seg_loss", "val_seg_loss"]
    if lntl:
        headers.append("bias_loss")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(headers)
        for log in logs:
            row = [log.epoch, repr(log.lr), repr(log.train_seg_loss), repr(log.val_seg_loss)]
            if lntl:
                row.append(repr(log.bias_loss) if log.bias_loss is not None else "")
            writer.writerow(row)
    return path
