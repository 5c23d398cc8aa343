"""Dataset loading, the synthetic biased-shapes generator and the temporal split.

Canonical interchange is the folder format: paired PNGs under
root/{split}/images and root/{split}/masks matched by filename stem, plus a
manifest.json at the root describing classes and provenance. A Cityscapes
adapter remaps the published label IDs onto the 19 train IDs + ignore.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

IGNORE_ID = 255

MANIFEST_SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"

SHAPE_KINDS = ("circle", "square", "triangle", "cross")


@dataclass
class Sample:
    """One RGB image with its integer class mask."""

    image: np.ndarray  # (H, W, 3) uint8
    mask: np.ndarray  # (H, W) integer class IDs
    id: str

    def validate(self, num_classes: int, ignore_id: int = IGNORE_ID) -> None:
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"sample {self.id}: image shape {self.image.shape} is not (H, W, 3)")
        if self.mask.ndim != 2:
            raise ValueError(f"sample {self.id}: mask shape {self.mask.shape} is not (H, W)")
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(
                f"sample {self.id}: image {self.image.shape[:2]} and mask {self.mask.shape} sizes differ"
            )
        values = np.unique(self.mask)
        bad = values[(values != ignore_id) & ((values < 0) | (values >= num_classes))]
        if bad.size:
            hist = {int(v): int((self.mask == v).sum()) for v in bad}
            raise ValueError(
                f"sample {self.id}: mask contains class IDs outside [0, {num_classes}) "
                f"and != {ignore_id}; offending value -> pixel count: {hist}"
            )


@dataclass
class DatasetSpec:
    """Where a folder dataset lives and how its labels are interpreted."""

    root: Path
    split: str
    num_classes: int
    class_names: list[str]
    category_map: dict[int, str]
    ignore_id: int = IGNORE_ID

    def __post_init__(self):
        self.root = Path(self.root)
        if len(self.class_names) != self.num_classes:
            raise ValueError(
                f"class_names has {len(self.class_names)} entries, expected {self.num_classes}"
            )
        missing = [c for c in range(self.num_classes) if c not in self.category_map]
        if missing:
            raise ValueError(f"category_map missing class IDs: {missing}")
        extra = [c for c in self.category_map if not 0 <= c < self.num_classes]
        if extra:
            raise ValueError(f"category_map has unknown class IDs: {extra}")


def _read_image(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def _read_mask(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"mask {path} is not single-channel (shape {arr.shape})")
    return arr.astype(np.int64)


def load_folder_dataset(spec: DatasetSpec) -> list[Sample]:
    """Load root/{split}/images/*.png with their masks, ordered lexicographically by stem."""
    images_dir = spec.root / spec.split / "images"
    masks_dir = spec.root / spec.split / "masks"
    if not images_dir.is_dir():
        raise FileNotFoundError(f"missing images directory: {images_dir}")
    if not masks_dir.is_dir():
        raise FileNotFoundError(f"missing masks directory: {masks_dir}")

    samples = []
    for img_path in sorted(images_dir.glob("*.png")):
        mask_path = masks_dir / img_path.name
        if not mask_path.is_file():
            raise FileNotFoundError(f"no mask for image {img_path.name}: expected {mask_path}")
        sample = Sample(image=_read_image(img_path), mask=_read_mask(mask_path), id=img_path.stem)
        sample.validate(spec.num_classes, spec.ignore_id)
        samples.append(sample)
    return samples


def temporal_split(samples: list[Sample], train_fraction: float) -> tuple[list[Sample], list[Sample]]:
    """Order-preserving prefix/suffix split, as though the id order were time.

    The first floor(N * train_fraction) samples become the training set and
    the remainder the validation set; nothing is shuffled, so near-duplicate
    neighbouring frames cannot leak across the boundary.
    """
    if not samples:
        raise ValueError("cannot split an empty sample collection")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    cut = int(len(samples) * train_fraction)
    return samples[:cut], samples[cut:]


# ---------------------------------------------------------------------------
# Cityscapes adapter
# ---------------------------------------------------------------------------

def _cityscapes_table() -> dict:
    with resources.files("segdebias.data").joinpath("cityscapes_labels.json").open() as f:
        return json.load(f)


def cityscapes_label_map() -> dict[int, int]:
    """The bundled labelId -> trainId table (19 train classes, 255 ignore)."""
    table = _cityscapes_table()
    return {int(k): int(v) for k, v in table["label_id_to_train_id"].items()}


def cityscapes_class_names() -> list[str]:
    table = _cityscapes_table()
    names = table["train_id_to_name"]
    return [names[str(i)] for i in range(len(names))]


def cityscapes_spec(root, split: str) -> DatasetSpec:
    from .metrics import CITYSCAPES_CATEGORY_MAP

    names = cityscapes_class_names()
    return DatasetSpec(
        root=Path(root),
        split=split,
        num_classes=len(names),
        class_names=names,
        category_map=dict(CITYSCAPES_CATEGORY_MAP),
    )


def adapt_cityscapes(root, split: str) -> list[Sample]:
    """Load a Cityscapes-layout tree and remap label IDs onto the 19 train IDs.

    Expects root/leftImg8bit/{split}/{city}/*_leftImg8bit.png with matching
    root/gtFine/{split}/{city}/*_gtFine_labelIds.png. Unknown label IDs and
    missing city directories are hard errors.
    """
    root = Path(root)
    images_root = root / "leftImg8bit" / split
    labels_root = root / "gtFine" / split
    if not images_root.is_dir():
        raise FileNotFoundError(f"missing Cityscapes image split: {images_root}")
    if not labels_root.is_dir():
        raise FileNotFoundError(f"missing Cityscapes annotation split: {labels_root}")

    label_map = cityscapes_label_map()
    lut = np.full(256, -1, dtype=np.int64)
    for label_id, train_id in label_map.items():
        lut[label_id] = train_id
    num_classes = len(cityscapes_class_names())

    samples = []
    for city_dir in sorted(p for p in images_root.iterdir() if p.is_dir()):
        gt_dir = labels_root / city_dir.name
        if not gt_dir.is_dir():
            raise FileNotFoundError(f"missing annotation directory for city: {gt_dir}")
        for img_path in sorted(city_dir.glob("*_leftImg8bit.png")):
            stem = img_path.name[: -len("_leftImg8bit.png")]
            gt_path = gt_dir / f"{stem}_gtFine_labelIds.png"
            if not gt_path.is_file():
                raise FileNotFoundError(f"no labelIds mask for {img_path.name}: expected {gt_path}")
            raw = _read_mask(gt_path)
            unknown = np.unique(raw[(raw < 0) | (raw > 255) | (lut[np.clip(raw, 0, 255)] == -1)])
            if unknown.size:
                raise ValueError(f"{gt_path}: unknown Cityscapes label IDs {unknown.tolist()}")
            sample = Sample(image=_read_image(img_path), mask=lut[raw], id=f"{city_dir.name}/{stem}")
            sample.validate(num_classes, IGNORE_ID)
            samples.append(sample)
    return samples


# ---------------------------------------------------------------------------
# Biased shapes generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BiasedShapesConfig:
    """Synthetic dataset with a planted class <-> colour correlation.

    Each image holds a few non-overlapping shapes on a noisy grey background.
    With probability `colour_correlation` a shape is filled with its class's
    signature colour, otherwise with a uniformly random colour - so rho=1
    plants a perfect colour shortcut and rho=0 none at all.
    """

    count: int
    image_size: tuple[int, int] = (64, 64)
    num_shape_classes: int = 4
    shapes_per_image: tuple[int, int] = (2, 4)
    colour_correlation: float = 0.95
    signature_colours: tuple[tuple[int, int, int], ...] = (
        (255, 0, 0),
        (0, 255, 0),
        (0, 0, 255),
        (255, 255, 0),
    )
    background_noise_std: float = 8.0

    def __post_init__(self):
        if self.count <= 0:
            raise ValueError("count must be > 0")
        if not 0.0 <= self.colour_correlation <= 1.0:
            raise ValueError(f"colour_correlation must be in [0, 1], got {self.colour_correlation}")
        if not 1 <= self.num_shape_classes <= len(SHAPE_KINDS):
            raise ValueError(f"num_shape_classes must be in [1, {len(SHAPE_KINDS)}]")
        if len(self.signature_colours) != self.num_shape_classes:
            raise ValueError("need one signature colour per shape class")
        if len(set(self.signature_colours)) != self.num_shape_classes:
            raise ValueError("signature colours must be pairwise distinct")
        lo, hi = self.shapes_per_image
        if not 1 <= lo <= hi:
            raise ValueError(f"invalid shapes_per_image range ({lo}, {hi})")
        if self.background_noise_std < 0:
            raise ValueError("background_noise_std must be >= 0")

    @property
    def num_classes(self) -> int:
        # background is class 0
        return self.num_shape_classes + 1

    @property
    def class_names(self) -> list[str]:
        return ["background"] + list(SHAPE_KINDS[: self.num_shape_classes])

    @property
    def category_map(self) -> dict[int, str]:
        return {c: name for c, name in enumerate(self.class_names)}


def _shape_mask(kind: str, h: int, w: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[:h, :w]
    dy = yy - cy
    dx = xx - cx
    if kind == "circle":
        return dy * dy + dx * dx <= r * r
    if kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "triangle":
        # isosceles, apex up
        rel = yy - (cy - r)
        return (rel >= 0) & (rel <= 2 * r) & (np.abs(dx) <= rel / 2)
    if kind == "cross":
        arm = max(1, r // 3)
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    raise ValueError(f"unknown shape kind: {kind}")


def generate_biased_shapes(cfg: BiasedShapesConfig, seed: int) -> list[Sample]:
    """Deterministically render `cfg.count` biased-shapes samples.

    Per-image RNG streams are derived from (seed, image index), so a given
    image is bit-identical regardless of how many others are generated.
    """
    h, w = cfg.image_size
    max_retries = 50
    r_min = max(3, min(h, w) // 12)
    r_max = max(r_min + 1, min(h, w) // 6)

    samples = []
    for i in range(cfg.count):
        rng = np.random.default_rng([seed, i])
        image = np.full((h, w, 3), 127.0)
        if cfg.background_noise_std > 0:
            image += rng.normal(0.0, cfg.background_noise_std, size=(h, w, 3))
        image = np.clip(np.floor(image + 0.5), 0, 255).astype(np.uint8)
        mask = np.zeros((h, w), dtype=np.int64)
        occupied = np.zeros((h, w), dtype=bool)

        n_shapes = int(rng.integers(cfg.shapes_per_image[0], cfg.shapes_per_image[1] + 1))
        for _ in range(n_shapes):
            placed = False
            for _attempt in range(max_retries):
                klass = int(rng.integers(1, cfg.num_shape_classes + 1))
                kind = SHAPE_KINDS[klass - 1]
                r = int(rng.integers(r_min, r_max + 1))
                cy = int(rng.integers(r, h - r))
                cx = int(rng.integers(r, w - r))
                shape = _shape_mask(kind, h, w, cy, cx, r)
                if not (shape & occupied).any():
                    if rng.random() < cfg.colour_correlation:
                        colour = np.array(cfg.signature_colours[klass - 1], dtype=np.uint8)
                    else:
                        colour = rng.integers(0, 256, size=3).astype(np.uint8)
                    image[shape] = colour
                    mask[shape] = klass
                    occupied |= shape
                    placed = True
                    break
            if not placed:
                raise RuntimeError(
                    f"image {i}: could not place {n_shapes} non-overlapping shapes after "
                    f"{max_retries} retries; use fewer or smaller shapes"
                )
        samples.append(Sample(image=image, mask=mask, id=f"{i:05d}"))
    return samples


# ---------------------------------------------------------------------------
# Folder writing + manifests
# ---------------------------------------------------------------------------

def write_split(samples: list[Sample], root, split: str) -> list[Path]:
    """Write samples as paired PNGs under root/{split}/{images,masks}. Returns written paths."""
    root = Path(root)
    images_dir = root / split / "images"
    masks_dir = root / split / "masks"
    images_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for s in samples:
        img_path = images_dir / f"{s.id}.png"
        mask_path = masks_dir / f"{s.id}.png"
        Image.fromarray(s.image, mode="RGB").save(img_path)
        Image.fromarray(s.mask.astype(np.uint8), mode="L").save(mask_path)
        written += [img_path, mask_path]
    return written


def write_manifest(root, manifest: dict) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = {"schema_version": MANIFEST_SCHEMA_VERSION, **manifest}
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def read_manifest(root) -> dict:
    path = Path(root) / MANIFEST_NAME
    if not path.is_file():
        raise FileNotFoundError(f"dataset manifest not found: {path}")
    manifest = json.loads(path.read_text())
    version = manifest.get("schema_version")
    if version != MANIFEST_SCHEMA_VERSION:
        raise ValueError(f"unsupported manifest schema_version: {version}")
    return manifest


def spec_from_manifest(root, split: str) -> DatasetSpec:
    """Build a DatasetSpec for a folder dataset from its manifest.json."""
    manifest = read_manifest(root)
    return DatasetSpec(
        root=Path(root),
        split=split,
        num_classes=manifest["num_classes"],
        class_names=manifest["class_names"],
        category_map={int(k): v for k, v in manifest["category_map"].items()},
        ignore_id=manifest.get("ignore_id", IGNORE_ID),
    )
