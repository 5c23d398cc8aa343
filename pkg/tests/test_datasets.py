"""Dataset tests: folder loading, Cityscapes remap, shapes generator, temporal split."""

import numpy as np
import pytest
from PIL import Image

from segdebias.datasets import (
    IGNORE_ID,
    BiasedShapesConfig,
    DatasetSpec,
    Sample,
    adapt_cityscapes,
    cityscapes_label_map,
    generate_biased_shapes,
    load_folder_dataset,
    read_manifest,
    spec_from_manifest,
    temporal_split,
    write_manifest,
    write_split,
)

try:
    from scipy.stats import chi2_contingency

    HAVE_SCIPY = True
except ImportError:  # pragma: no cover
    HAVE_SCIPY = False


def tiny_spec(root, split="train", num_classes=3):
    return DatasetSpec(
        root=root,
        split=split,
        num_classes=num_classes,
        class_names=[f"c{i}" for i in range(num_classes)],
        category_map={i: f"c{i}" for i in range(num_classes)},
    )


def write_pair(root, split, name, mask_value=1, size=(8, 8)):
    images = root / split / "images"
    masks = root / split / "masks"
    images.mkdir(parents=True, exist_ok=True)
    masks.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    img = rng.integers(0, 256, size=(*size, 3), dtype=np.uint8)
    Image.fromarray(img, "RGB").save(images / f"{name}.png")
    mask = np.full(size, mask_value, dtype=np.uint8)
    Image.fromarray(mask, "L").save(masks / f"{name}.png")


class TestFolderLoader:
    def test_loads_pairs_in_name_order(self, tmp_path):
        for name in ("b", "a", "c"):
            write_pair(tmp_path, "train", name)
        samples = load_folder_dataset(tiny_spec(tmp_path))
        assert [s.id for s in samples] == ["a", "b", "c"]
        assert all(s.image.shape == (8, 8, 3) and s.mask.shape == (8, 8) for s in samples)

    def test_missing_mask_is_hard_error_naming_file(self, tmp_path):
        write_pair(tmp_path, "train", "a")
        (tmp_path / "train" / "masks" / "a.png").unlink()
        with pytest.raises(FileNotFoundError, match="a.png"):
            load_folder_dataset(tiny_spec(tmp_path))

    def test_out_of_range_class_errors_with_histogram(self, tmp_path):
        write_pair(tmp_path, "train", "a", mask_value=8)  # C=3, so 8 = C+5
        with pytest.raises(ValueError, match="8"):
            load_folder_dataset(tiny_spec(tmp_path))

    def test_two_loads_identical(self, tmp_path):
        for name in ("x", "y"):
            write_pair(tmp_path, "train", name)
        first = load_folder_dataset(tiny_spec(tmp_path))
        second = load_folder_dataset(tiny_spec(tmp_path))
        assert [s.id for s in first] == [s.id for s in second]
        assert all(np.array_equal(a.image, b.image) for a, b in zip(first, second))

    def test_ignore_id_allowed_in_masks(self, tmp_path):
        write_pair(tmp_path, "train", "a", mask_value=IGNORE_ID)
        samples = load_folder_dataset(tiny_spec(tmp_path))
        assert (samples[0].mask == IGNORE_ID).all()


class TestDatasetSpec:
    def test_class_names_length_enforced(self, tmp_path):
        with pytest.raises(ValueError, match="class_names"):
            DatasetSpec(tmp_path, "train", 3, ["a"], {0: "a", 1: "a", 2: "a"})

    def test_category_map_must_cover_all_classes(self, tmp_path):
        with pytest.raises(ValueError, match="category_map"):
            DatasetSpec(tmp_path, "train", 2, ["a", "b"], {0: "a"})


class TestTemporalSplit:
    def _samples(self, n):
        img = np.zeros((2, 2, 3), dtype=np.uint8)
        mask = np.zeros((2, 2), dtype=np.int64)
        return [Sample(img, mask, f"{i:04d}") for i in range(n)]

    def test_floor_arithmetic(self):
        train, val = temporal_split(self._samples(10), 0.7)
        assert len(train) == 7 and len(val) == 3

    def test_synthia_sized_split(self):
        # 9,400 images at 70/30 -> 6,580 / 2,820
        train, val = temporal_split(self._samples(9400), 0.7)
        assert len(train) == 6580 and len(val) == 2820

    def test_concatenation_restores_order(self):
        samples = self._samples(9)
        train, val = temporal_split(samples, 0.4)
        assert [s.id for s in train + val] == [s.id for s in samples]

    def test_partitions_disjoint_and_exhaustive(self):
        samples = self._samples(13)
        train, val = temporal_split(samples, 0.5)
        train_ids = {s.id for s in train}
        val_ids = {s.id for s in val}
        assert not train_ids & val_ids
        assert train_ids | val_ids == {s.id for s in samples}

    def test_empty_input_errors(self):
        with pytest.raises(ValueError, match="empty"):
            temporal_split([], 0.5)

    def test_fraction_bounds(self):
        with pytest.raises(ValueError):
            temporal_split(self._samples(3), 1.0)


class TestCityscapesAdapter:
    def _make_city_tree(self, root, split, cities, per_city, label_value=7, size=(6, 6)):
        for city in cities:
            img_dir = root / "leftImg8bit" / split / city
            gt_dir = root / "gtFine" / split / city
            img_dir.mkdir(parents=True)
            gt_dir.mkdir(parents=True)
            for i in range(per_city):
                stem = f"{city}_{i:06d}_000019"
                img = np.zeros((*size, 3), dtype=np.uint8)
                Image.fromarray(img, "RGB").save(img_dir / f"{stem}_leftImg8bit.png")
                mask = np.full(size, label_value, dtype=np.uint8)
                Image.fromarray(mask, "L").save(gt_dir / f"{stem}_gtFine_labelIds.png")

    def test_road_remaps_to_train_id_zero(self, tmp_path):
        self._make_city_tree(tmp_path, "val", ["aachen"], 2, label_value=7)
        samples = adapt_cityscapes(tmp_path, "val")
        assert len(samples) == 2
        assert (samples[0].mask == 0).all()

    def test_unlabeled_remaps_to_ignore(self, tmp_path):
        self._make_city_tree(tmp_path, "val", ["aachen"], 1, label_value=0)
        samples = adapt_cityscapes(tmp_path, "val")
        assert (samples[0].mask == IGNORE_ID).all()

    def test_full_remap_table_matches_published_mapping(self, tmp_path):
        # every raw label id present in one mask; the bundled table is the oracle
        table = cityscapes_label_map()
        raw = np.array(sorted(table), dtype=np.uint8).reshape(1, -1)
        city = tmp_path / "leftImg8bit" / "val" / "x"
        gt = tmp_path / "gtFine" / "val" / "x"
        city.mkdir(parents=True)
        gt.mkdir(parents=True)
        Image.fromarray(np.zeros((*raw.shape, 3), dtype=np.uint8), "RGB").save(
            city / "x_000000_000019_leftImg8bit.png"
        )
        Image.fromarray(raw, "L").save(gt / "x_000000_000019_gtFine_labelIds.png")
        samples = adapt_cityscapes(tmp_path, "val")
        expected = np.array([table[v] for v in sorted(table)]).reshape(1, -1)
        np.testing.assert_array_equal(samples[0].mask, expected)

    def test_official_val_count(self, tmp_path):
        # stand-in for the official layout: 3 cities totalling 500 annotated frames
        self._make_city_tree(tmp_path, "val", ["frankfurt"], 267, size=(2, 2))
        self._make_city_tree(tmp_path, "val", ["lindau"], 59, size=(2, 2))
        self._make_city_tree(tmp_path, "val", ["munster"], 174, size=(2, 2))
        assert len(adapt_cityscapes(tmp_path, "val")) == 500

    def test_unknown_label_id_errors(self, tmp_path):
        self._make_city_tree(tmp_path, "val", ["aachen"], 1, label_value=99)
        with pytest.raises(ValueError, match="unknown"):
            adapt_cityscapes(tmp_path, "val")

    def test_missing_city_annotation_dir_errors(self, tmp_path):
        self._make_city_tree(tmp_path, "val", ["aachen"], 1)
        import shutil

        shutil.rmtree(tmp_path / "gtFine" / "val" / "aachen")
        with pytest.raises(FileNotFoundError, match="aachen"):
            adapt_cityscapes(tmp_path, "val")

    def test_ordering_across_cities(self, tmp_path):
        self._make_city_tree(tmp_path, "val", ["zurich", "aachen"], 1)
        samples = adapt_cityscapes(tmp_path, "val")
        assert [s.id.split("/")[0] for s in samples] == ["aachen", "zurich"]


class TestBiasedShapes:
    def test_full_correlation_paints_signature_colours(self):
        cfg = BiasedShapesConfig(count=20, colour_correlation=1.0)
        for sample in generate_biased_shapes(cfg, seed=5):
            for klass in np.unique(sample.mask):
                if klass == 0:
                    continue
                region = sample.image[sample.mask == klass]
                expected = np.array(cfg.signature_colours[klass - 1])
                assert np.array_equal(region, np.tile(expected, (len(region), 1)))

    def test_deterministic_given_config_and_seed(self):
        cfg = BiasedShapesConfig(count=5)
        a = generate_biased_shapes(cfg, seed=3)
        b = generate_biased_shapes(cfg, seed=3)
        for s, t in zip(a, b):
            assert s.id == t.id
            assert np.array_equal(s.image, t.image)
            assert np.array_equal(s.mask, t.mask)

    def test_different_seeds_differ(self):
        cfg = BiasedShapesConfig(count=3)
        a = generate_biased_shapes(cfg, seed=3)
        b = generate_biased_shapes(cfg, seed=4)
        assert any(not np.array_equal(s.image, t.image) for s, t in zip(a, b))

    def test_shape_count_within_range(self):
        cfg = BiasedShapesConfig(count=30, shapes_per_image=(2, 4))
        for sample in generate_biased_shapes(cfg, seed=1):
            # non-overlapping shapes, so connected regions per class >= 1;
            # count distinct shapes via mask transitions is overkill - check classes
            present = np.unique(sample.mask)
            assert 0 in present
            assert 1 <= len(present) - 1 <= 4

    def test_masks_satisfy_sample_invariant(self):
        cfg = BiasedShapesConfig(count=10)
        for sample in generate_biased_shapes(cfg, seed=2):
            sample.validate(cfg.num_classes)

    @pytest.mark.skipif(not HAVE_SCIPY, reason="scipy not installed")
    def test_zero_correlation_independence(self):
        # chi-squared test of class vs. dominant-colour-channel over many shapes
        cfg = BiasedShapesConfig(count=500, colour_correlation=0.0)
        samples = generate_biased_shapes(cfg, seed=8)
        table = np.zeros((cfg.num_shape_classes, 3), dtype=np.int64)
        for sample in samples:
            for klass in np.unique(sample.mask):
                if klass == 0:
                    continue
                mean_colour = sample.image[sample.mask == klass].mean(axis=0)
                table[klass - 1, int(np.argmax(mean_colour))] += 1
        _, p_value, _, _ = chi2_contingency(table)
        assert p_value > 0.01

    def test_impossible_packing_raises(self):
        cfg = BiasedShapesConfig(count=1, image_size=(16, 16), shapes_per_image=(30, 30))
        with pytest.raises(RuntimeError, match="fewer or smaller"):
            generate_biased_shapes(cfg, seed=0)

    def test_invalid_configs_rejected(self):
        with pytest.raises(ValueError, match="colour_correlation"):
            BiasedShapesConfig(count=1, colour_correlation=1.5)
        with pytest.raises(ValueError, match="count"):
            BiasedShapesConfig(count=0)
        with pytest.raises(ValueError, match="distinct"):
            BiasedShapesConfig(
                count=1,
                num_shape_classes=2,
                signature_colours=((1, 2, 3), (1, 2, 3)),
            )


class TestRoundTripAndManifest:
    def test_write_then_load_round_trips(self, tmp_path):
        cfg = BiasedShapesConfig(count=4)
        samples = generate_biased_shapes(cfg, seed=6)
        write_split(samples, tmp_path, "train")
        write_manifest(
            tmp_path,
            {
                "kind": "biased_shapes",
                "num_classes": cfg.num_classes,
                "ignore_id": IGNORE_ID,
                "class_names": cfg.class_names,
                "category_map": {str(k): v for k, v in cfg.category_map.items()},
            },
        )
        spec = spec_from_manifest(tmp_path, "train")
        loaded = load_folder_dataset(spec)
        assert len(loaded) == 4
        for s, t in zip(samples, loaded):
            assert np.array_equal(s.image, t.image)
            assert np.array_equal(s.mask, t.mask)

    def test_manifest_schema_version_checked(self, tmp_path):
        write_manifest(tmp_path, {"num_classes": 2})
        manifest = read_manifest(tmp_path)
        manifest["schema_version"] = 99
        (tmp_path / "manifest.json").write_text(__import__("json").dumps(manifest))
        with pytest.raises(ValueError, match="schema_version"):
            read_manifest(tmp_path)
