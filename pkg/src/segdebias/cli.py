"""Operator surface: generate | corrupt | train | evaluate | report.

Every subcommand is deterministic given its inputs, config and seed. Configs
are YAML files; every train-config field also has a flag override, with
precedence flags > file > defaults.
"""

from __future__ import annotations

import argparse
import datetime
import json
import shutil
import sys
import uuid
from pathlib import Path

import numpy as np
import yaml
from PIL import Image

from . import __version__
from .datasets import (
    IGNORE_ID,
    BiasedShapesConfig,
    Sample,
    adapt_cityscapes,
    cityscapes_spec,
    generate_biased_shapes,
    load_folder_dataset,
    read_manifest,
    spec_from_manifest,
    write_manifest,
    write_split,
)
from .metrics import MetricsReport, percent_change
from .training import TrainConfig, train_baseline, train_lntl
from .transforms import JitterParams, colour_jitter, invert, to_greyscale

MANIFEST_SCHEMA_VERSION = 1
CORRUPT_VARIANTS = ("greyscale", "invert", "jitter")


def _fail(message: str) -> "NoReturn":  # noqa: F821
    raise SystemExit(f"error: {message}")


def _check_output_dir(out: Path, force: bool):
    if out.exists() and any(out.iterdir()):
        if not force:
            _fail(f"output directory {out} is not empty (use --force to overwrite)")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


def _load_yaml(path) -> dict:
    path = Path(path)
    if not path.is_file():
        _fail(f"config file not found: {path}")
    with open(path) as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        _fail(f"config file {path} must hold a mapping")
    return data


def _utcnow() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def _write_run_manifest(out_dir: Path, command: str, config: dict, seed, started: str, artifacts: list[Path]) -> Path:
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "run_id": f"{command}-{uuid.uuid4().hex[:12]}",
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "started": started,
        "finished": _utcnow(),
        "artifacts": sorted(str(p) for p in artifacts),
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    started = _utcnow()
    raw = _load_yaml(args.config)
    splits = raw.pop("splits", None)
    if not isinstance(splits, dict) or not splits:
        _fail("generate config needs a 'splits' mapping (e.g. train/val)")
    out = args.out or raw.pop("out", None)
    if not out:
        _fail("generate needs --out or 'out' in the config")
    out = Path(out)
    raw.pop("out", None)
    _check_output_dir(out, args.force)

    base_seed = args.seed if args.seed is not None else 0
    split_records = {}
    artifacts: list[Path] = []
    cfg = None
    for i, (split, overrides) in enumerate(splits.items()):
        overrides = dict(overrides or {})
        seed = overrides.pop("seed", base_seed + i)
        merged = {**raw, **overrides}
        for key in ("image_size", "shapes_per_image"):
            if key in merged:
                merged[key] = tuple(merged[key])
        if "signature_colours" in merged:
            merged["signature_colours"] = tuple(tuple(c) for c in merged["signature_colours"])
        try:
            cfg = BiasedShapesConfig(**merged)
        except (TypeError, ValueError) as exc:
            _fail(f"invalid biased-shapes config for split '{split}': {exc}")
        samples = generate_biased_shapes(cfg, seed)
        artifacts += write_split(samples, out, split)
        split_records[split] = {
            "count": cfg.count,
            "colour_correlation": cfg.colour_correlation,
            "seed": seed,
        }
        freqs = _class_frequencies(samples, cfg.num_classes)
        summary = ", ".join(
            f"{name}: {100 * f:.1f}%" for name, f in zip(cfg.class_names, freqs)
        )
        print(f"[generate] {split}: {len(samples)} samples | pixel frequencies: {summary}")

    manifest_path = write_manifest(
        out,
        {
            "kind": "biased_shapes",
            "num_classes": cfg.num_classes,
            "ignore_id": IGNORE_ID,
            "class_names": cfg.class_names,
            "category_map": {str(k): v for k, v in cfg.category_map.items()},
            "generator": {"config": raw, "splits": split_records},
        },
    )
    artifacts.append(manifest_path)
    _write_run_manifest(out, "generate", {**raw, "splits": split_records}, base_seed, started, artifacts)
    return 0


def _class_frequencies(samples: list[Sample], num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        counts += np.bincount(s.mask.reshape(-1), minlength=num_classes)[:num_classes]
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# corrupt
# ---------------------------------------------------------------------------

def cmd_corrupt(args) -> int:
    started = _utcnow()
    if args.variant not in CORRUPT_VARIANTS:
        _fail(f"unknown variant {args.variant!r}; valid variants: {', '.join(CORRUPT_VARIANTS)}")
    src = Path(args.src)
    out = Path(args.out)
    manifest = read_manifest(src)
    _check_output_dir(out, args.force)

    splits = args.splits.split(",") if args.splits else sorted(
        p.name for p in src.iterdir() if p.is_dir() and (p / "images").is_dir()
    )
    if not splits:
        _fail(f"no splits with an images/ directory found under {src}")

    seed = args.seed if args.seed is not None else 0
    params = JitterParams()
    artifacts: list[Path] = []
    for split in splits:
        spec = spec_from_manifest(src, split)
        samples = load_folder_dataset(spec)
        images_dir = out / split / "images"
        masks_dir = out / split / "masks"
        images_dir.mkdir(parents=True, exist_ok=True)
        masks_dir.mkdir(parents=True, exist_ok=True)
        for i, sample in enumerate(samples):
            if args.variant == "greyscale":
                image = to_greyscale(sample.image)
            elif args.variant == "invert":
                image = invert(sample.image)
            else:
                per_image_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
                image = colour_jitter(sample.image, params, per_image_seed)
            img_path = images_dir / f"{sample.id}.png"
            Image.fromarray(image, mode="RGB").save(img_path)
            mask_path = masks_dir / f"{sample.id}.png"
            # masks are never colour-transformed: byte-for-byte copies
            shutil.copyfile(src / split / "masks" / f"{sample.id}.png", mask_path)
            artifacts += [img_path, mask_path]
        print(f"[corrupt] {split}: {len(samples)} images -> {args.variant}")

    manifest_path = write_manifest(
        out,
        {
            "kind": "corrupted",
            "num_classes": manifest["num_classes"],
            "ignore_id": manifest.get("ignore_id", IGNORE_ID),
            "class_names": manifest["class_names"],
            "category_map": manifest["category_map"],
            "corruption": {"variant": args.variant, "seed": seed, "source": str(src)},
        },
    )
    artifacts.append(manifest_path)
    _write_run_manifest(out, "corrupt", {"variant": args.variant, "src": str(src)}, seed, started, artifacts)
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAIN_FLAGS = {
    "scheme": str,
    "epochs": int,
    "base_lr": float,
    "lr_step": int,
    "lr_gamma": float,
    "warmup_epochs": int,
    "grl_scale": float,
    "bias_loss_weight": float,
    "batch_size": int,
    "seed": int,
    "bias_bins": int,
    "width": int,
    "depth": int,
    "fork_index": int,
    "device": str,
}

_DATASET_FLAGS = {
    "format": str,
    "root": str,
    "train_split": str,
    "val_split": str,
    "temporal_split_fraction": float,
}


def _build_train_config(args) -> TrainConfig:
    file_cfg = _load_yaml(args.config) if args.config else {}
    for name in _TRAIN_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            file_cfg[name] = value
    if args.grl_ramp:
        file_cfg["grl_ramp"] = True
    ds = dict(file_cfg.get("dataset", {}))
    for name in _DATASET_FLAGS:
        value = getattr(args, f"dataset_{name}", None)
        if value is not None:
            ds[name] = value
    file_cfg["dataset"] = ds
    if args.out is not None:
        file_cfg["out_dir"] = args.out
    try:
        cfg = TrainConfig.from_dict(file_cfg)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        _fail(f"invalid train config: {exc}")
    return cfg


def cmd_train(args) -> int:
    started = _utcnow()
    cfg = _build_train_config(args)
    out_dir = Path(cfg.out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not args.force:
        _fail(f"output directory {out_dir} is not empty (use --force to overwrite)")
    if out_dir.exists() and args.force:
        shutil.rmtree(out_dir)

    runner = train_lntl if cfg.scheme == "lntl" else train_baseline
    result = runner(cfg, resume_from=args.resume)

    from .viz import plot_loss_curves

    curves = [
        ("train", [l.epoch for l in result.epoch_logs], [l.train_seg_loss for l in result.epoch_logs]),
        ("val", [l.epoch for l in result.epoch_logs], [l.val_seg_loss for l in result.epoch_logs]),
    ]
    if cfg.scheme == "lntl":
        curves.append(
            ("bias head", [l.epoch for l in result.epoch_logs],
             [l.bias_loss for l in result.epoch_logs])
        )
    plot_path = plot_loss_curves(curves, out_dir / "loss_curves.png", title=f"{cfg.scheme} training")

    artifacts = [
        result.best_checkpoint,
        result.final_checkpoint,
        result.csv_path,
        result.summary_path,
        plot_path,
    ]
    manifest_path = _write_run_manifest(out_dir, "train", cfg.to_dict(), cfg.seed, started, artifacts)
    print(
        f"[train] {cfg.scheme} done: best epoch {result.best_epoch} "
        f"(val loss {result.best_val_loss:.4f}); artifacts in {out_dir}"
    )
    print(f"[train] manifest: {manifest_path}")
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _load_eval_samples(args) -> tuple[list[Sample], "DatasetSpec"]:
    root = Path(args.dataset)
    if args.dataset_format == "cityscapes":
        spec = cityscapes_spec(root, args.split)
        return adapt_cityscapes(root, args.split), spec
    spec = spec_from_manifest(root, args.split)
    return load_folder_dataset(spec), spec


def cmd_evaluate(args) -> int:
    from .evaluation import (
        build_report,
        checkpoint_logits_fn,
        evaluate_samples,
        worst_image_indices,
    )
    from .model import load_checkpoint

    samples, spec = _load_eval_samples(args)
    if not samples:
        _fail(f"no samples found under {args.dataset}/{args.split}")
    model, payload = load_checkpoint(args.checkpoint)
    if model.num_classes != spec.num_classes:
        _fail(
            f"checkpoint has {model.num_classes} classes but dataset declares {spec.num_classes}"
        )
    extra = payload.get("extra", {})
    mean = extra.get("normalize_mean", [0.5, 0.5, 0.5])
    std = extra.get("normalize_std", [0.5, 0.5, 0.5])
    scheme = (payload.get("train_config") or {}).get("scheme", "baseline")

    logits_fn = checkpoint_logits_fn(model, mean, std, device=args.device)
    outcome = evaluate_samples(
        logits_fn, samples, spec.num_classes, spec.ignore_id, batch_size=args.batch_size
    )
    report = build_report(
        outcome,
        class_names=spec.class_names,
        category_map=spec.category_map,
        variant=args.variant,
        scheme=args.scheme or scheme,
        checkpoint=str(args.checkpoint),
        dataset=f"{args.dataset}:{args.split}",
    )

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    md_path = out.with_suffix(".md")
    md_path.write_text(report.to_markdown())

    if args.overlays > 0:
        from .viz import class_palette, overlay_prediction

        overlay_dir = out.parent / f"{out.stem}_overlays"
        overlay_dir.mkdir(parents=True, exist_ok=True)
        palette = class_palette(spec.num_classes)
        for idx in worst_image_indices(outcome, args.overlays):
            sample = samples[idx]
            pred = logits_fn(sample.image[None]).argmax(axis=1)[0]
            blended = overlay_prediction(sample.image, pred, palette)
            name = sample.id.replace("/", "__")
            Image.fromarray(blended, mode="RGB").save(overlay_dir / f"{name}.png")

    print(f"[evaluate] {args.variant}: mIoU {100 * report.miou:.2f}% loss {report.loss:.4f} -> {out}")
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def _best_marker(a: float | None, b: float | None, larger_is_better: bool, digits: int = 2) -> tuple[str, str]:
    def fmt(v):
        return "n/a" if v is None else f"{v:.{digits}f}"

    if a is None or b is None or a == b:
        return fmt(a), fmt(b)
    a_best = (a > b) == larger_is_better
    return (f"**{fmt(a)}**", fmt(b)) if a_best else (fmt(a), f"**{fmt(b)}**")


def cmd_report(args) -> int:
    reports = [MetricsReport.from_json(Path(p).read_text()) for p in args.reports]
    if len(reports) < 2:
        _fail("report needs at least two MetricsReport JSON files")
    class_sets = {tuple(r.class_names) for r in reports}
    if len(class_sets) != 1:
        _fail("reports have mismatched class sets and cannot be compared")

    variants: list[str] = []
    pairs: dict[str, dict[str, MetricsReport]] = {}
    for r in reports:
        role = "baseline" if r.scheme == "baseline" else "ours"
        slot = pairs.setdefault(r.variant, {})
        if role in slot:
            _fail(f"duplicate {role} report for variant {r.variant!r}")
        slot[role] = r
        if r.variant not in variants:
            variants.append(r.variant)

    lines = ["## Class-wise mIoU and loss per validation variant", ""]
    lines += ["| Variant | mIoU (%) Baseline | mIoU (%) Ours | Loss Baseline | Loss Ours |",
              "| --- | --- | --- | --- | --- |"]
    rows = []
    for variant in variants:
        base = pairs[variant].get("baseline")
        ours = pairs[variant].get("ours")
        miou_b = 100 * base.miou if base else None
        miou_o = 100 * ours.miou if ours else None
        loss_b = base.loss if base else None
        loss_o = ours.loss if ours else None
        mb, mo = _best_marker(miou_b, miou_o, larger_is_better=True)
        lb, lo = _best_marker(loss_b, loss_o, larger_is_better=False, digits=3)
        lines.append(f"| {variant} | {mb} | {mo} | {lb} | {lo} |")
        row = {
            "variant": variant,
            "miou_baseline": miou_b,
            "miou_ours": miou_o,
            "loss_baseline": loss_b,
            "loss_ours": loss_o,
            "miou_percent_change": (
                percent_change(miou_b, miou_o) if miou_b not in (None, 0) and miou_o is not None else None
            ),
        }
        rows.append(row)

    category_block, category_json = _category_table(variants, pairs)
    lines += [""] + category_block

    disparities = _variant_disparities(reports, variants)
    if disparities:
        lines += ["", "## Covariate-shift disparity (relative mIoU change vs reference variant)", "",
                  "| Scheme | Variant | mIoU (%) ref | mIoU (%) variant | Change |",
                  "| --- | --- | --- | --- | --- |"]
        for d in disparities:
            lines.append(
                f"| {d['scheme']} | {d['variant']} | {d['miou_reference']:.2f} "
                f"| {d['miou_variant']:.2f} | {d['percent_change']:+.2f}% |"
            )

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    md_path = out.with_suffix(".md")
    md_path.write_text("\n".join(lines) + "\n")
    comparison = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "rows": rows,
        "categories": category_json,
        "disparities": disparities,
    }
    out.with_suffix(".json").write_text(json.dumps(comparison, indent=2) + "\n")
    print("\n".join(lines))
    print(f"[report] wrote {md_path} and {out.with_suffix('.json')}")
    return 0


def _variant_disparities(reports, variants) -> list[dict]:
    """Per scheme: relative mIoU change from the reference variant (rgb if present)."""
    reference = "rgb" if "rgb" in variants else variants[0]
    by_scheme: dict[str, dict[str, MetricsReport]] = {}
    for r in reports:
        by_scheme.setdefault(r.scheme, {})[r.variant] = r
    disparities = []
    for scheme in sorted(by_scheme):
        ref = by_scheme[scheme].get(reference)
        if ref is None or ref.miou == 0:
            continue
        for variant in variants:
            if variant == reference or variant not in by_scheme[scheme]:
                continue
            other = by_scheme[scheme][variant]
            disparities.append({
                "scheme": scheme,
                "variant": variant,
                "reference": reference,
                "miou_reference": 100 * ref.miou,
                "miou_variant": 100 * other.miou,
                "percent_change": percent_change(ref.miou, other.miou),
            })
    return disparities


def _category_table(variants, pairs) -> tuple[list[str], dict]:
    complete = [
        v for v in variants
        if {"baseline", "ours"} <= set(pairs[v])
        and pairs[v]["baseline"].category_names
        and pairs[v]["ours"].category_names
    ]
    if not complete:
        return ["(no category table: need baseline+ours reports with category data)"], {}
    names = pairs[complete[0]]["baseline"].category_names
    header = "| Categories | " + " | ".join(f"{v} Baseline | {v} Ours" for v in complete) + " |"
    sep = "| --- |" + " --- |" * (2 * len(complete))
    lines = ["## Category-wise mIoU", "", header, sep]

    def cell(value):
        return "n/a" if value is None else f"{100 * value:.1f}"

    for ci, cat in enumerate(names):
        cells = []
        for v in complete:
            cells.append(cell(pairs[v]["baseline"].per_category_iou[ci]))
            cells.append(cell(pairs[v]["ours"].per_category_iou[ci]))
        lines.append(f"| {cat} | " + " | ".join(cells) + " |")

    averages = {}
    avg_cells = []
    pc_cells = []
    for v in complete:
        avg_b = pairs[v]["baseline"].category_average
        avg_o = pairs[v]["ours"].category_average
        avg_cells += [cell(avg_b), cell(avg_o)]
        pc = percent_change(avg_b, avg_o) if avg_b else None
        pc_cells += ["", "n/a" if pc is None else f"{pc:+.1f}"]
        averages[v] = {
            "average_baseline": None if avg_b is None else 100 * avg_b,
            "average_ours": None if avg_o is None else 100 * avg_o,
            "percent_change": pc,
        }
    lines.append("| Average | " + " | ".join(avg_cells) + " |")
    lines.append("| *Ours* ±% | " + " | ".join(pc_cells) + " |")
    return lines, {"category_names": names, "per_variant": averages}


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segdebias",
        description="Colour-bias unlearning for semantic segmentation: data, training, evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"segdebias {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a biased-shapes folder dataset")
    p.add_argument("--config", required=True, help="biased-shapes YAML config")
    p.add_argument("--out", help="output dataset root")
    p.add_argument("--seed", type=int, help="base seed for splits that omit one")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("corrupt", help="materialise a colour-corrupted copy of a dataset")
    p.add_argument("--src", required=True, help="source dataset root (canonical folder format)")
    p.add_argument("--variant", required=True, help=f"one of: {', '.join(CORRUPT_VARIANTS)}")
    p.add_argument("--out", required=True, help="output dataset root")
    p.add_argument("--splits", help="comma-separated splits (default: all present)")
    p.add_argument("--seed", type=int, help="jitter seed (default 0)")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train", help="train a baseline or LNTL model")
    p.add_argument("--config", help="TrainConfig YAML file")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--force", action="store_true")
    p.add_argument("--grl-ramp", action="store_true", help="ramp the reversal scale linearly")
    for name, typ in _TRAIN_FLAGS.items():
        p.add_argument(f"--{name.replace('_', '-')}", type=typ, dest=name)
    for name, typ in _DATASET_FLAGS.items():
        p.add_argument(f"--dataset-{name.replace('_', '-')}", type=typ, dest=f"dataset_{name}")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True, help="dataset root")
    p.add_argument("--dataset-format", default="folder", choices=["folder", "cityscapes"])
    p.add_argument("--split", default="val")
    p.add_argument("--out", required=True, help="output report JSON path")
    p.add_argument("--variant", default="rgb", help="label for this validation variant")
    p.add_argument("--scheme", help="override the scheme label (default: from checkpoint)")
    p.add_argument("--overlays", type=int, default=0, help="write overlays for the n worst images")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--device", default="cpu")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="compare evaluation reports into Table-style matrices")
    p.add_argument("reports", nargs="+", help="MetricsReport JSON files")
    p.add_argument("--out", required=True, help="output path stem (.md and .json are written)")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
