import json
import math

import numpy as np
import pytest
from PIL import Image

from histotriplet.allocation import largest_remainder_allocation
from histotriplet.corpus import (
    TISSUE_CLASSES,
    ArraySlideStore,
    ImageDirectoryStore,
    SlideRecord,
    TileRef,
    center_crop,
    filter_tissue_tiles,
    grid_tile_slide,
    gradient_slide,
    index_slides,
    load_labeled_patches,
    materialize_patch,
    mean_saturation,
    split_source_target,
)
from histotriplet.errors import (
    ManifestParseError,
    PatchReadError,
    RecordValidationError,
    UnsupportedResolutionError,
)


def write_manifest(path, rows):
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")


def slide_row(**kw):
    row = {
        "slide_id": "s1",
        "organ_site": "gastrointestinal",
        "subtype": "STAD",
        "base_width": 1024,
        "base_height": 1024,
        "base_magnification": 20.0,
        "path": "s1.png",
    }
    row.update(kw)
    return row


class TestIndexSlides:
    def test_single_consistent_record(self, tmp_path):
        manifest = tmp_path / "slides.manifest"
        write_manifest(manifest, [slide_row()])
        records = index_slides(manifest)
        assert len(records) == 1
        assert records[0].subtype == "STAD"
        assert records[0].organ_site == "gastrointestinal"

    def test_inconsistent_subtype_organ_pair(self, tmp_path):
        manifest = tmp_path / "slides.manifest"
        write_manifest(manifest, [slide_row(organ_site="lung")])
        with pytest.raises(RecordValidationError):
            index_slides(manifest)

    def test_three_records_span_three_organs(self, tmp_path):
        manifest = tmp_path / "slides.manifest"
        rows = [
            slide_row(slide_id="a", subtype="PRAD", organ_site="prostate"),
            slide_row(slide_id="b", subtype="COAD", organ_site="gastrointestinal"),
            slide_row(slide_id="c", subtype="LUAD", organ_site="lung"),
        ]
        write_manifest(manifest, rows)
        records = index_slides(manifest)
        assert [r.slide_id for r in records] == ["a", "b", "c"]
        assert {r.organ_site for r in records} == {
            "prostate",
            "gastrointestinal",
            "lung",
        }
        # fields round-trip
        for row, rec in zip(rows, records):
            assert rec.base_width == row["base_width"]
            assert rec.base_magnification == row["base_magnification"]
            assert rec.path == row["path"]

    def test_unknown_subtype_becomes_unlabeled(self, tmp_path):
        manifest = tmp_path / "slides.manifest"
        write_manifest(manifest, [slide_row(subtype="???")])
        (rec,) = index_slides(manifest)
        assert rec.subtype == "unlabeled"

    def test_malformed_line_names_line_number(self, tmp_path):
        manifest = tmp_path / "slides.manifest"
        with open(manifest, "w") as fh:
            fh.write(json.dumps(slide_row()) + "\n")
            fh.write("{not json\n")
        with pytest.raises(ManifestParseError) as exc:
            index_slides(manifest)
        assert exc.value.line_number == 2


class TestGridTiling:
    def test_64_tiles_on_1024_slide(self):
        slide = SlideRecord("s", "other", "unlabeled", 1024, 1024, 20.0)
        tiles = grid_tile_slide(slide, patch_size=128, magnification=20.0, stride=128)
        # oracle: floor((1024-128)/128)+1 = 8 per axis
        assert len(tiles) == 64
        assert tiles[0].center_x == 64.0 and tiles[0].center_y == 64.0
        # row-major: second tile advances x
        assert tiles[1].center_x == 192.0 and tiles[1].center_y == 64.0

    def test_no_footprint_fits(self):
        slide = SlideRecord("s", "other", "unlabeled", 100, 100, 20.0)
        assert grid_tile_slide(slide, patch_size=128) == []

    def test_downsampled_footprint_counting(self):
        slide = SlideRecord("s", "other", "unlabeled", 4096, 4096, 40.0)
        tiles = grid_tile_slide(slide, patch_size=128, magnification=20.0, stride=128)
        # footprint at base is 256, stride at base 256:
        # floor((4096-256)/256)+1 = 16 per axis
        assert len(tiles) == 256
        x0, y0, x1, y1 = tiles[0].footprint(slide.base_magnification)
        assert (x1 - x0, y1 - y0) == (256.0, 256.0)

    def test_magnification_above_base_rejected(self):
        slide = SlideRecord("s", "other", "unlabeled", 1024, 1024, 20.0)
        with pytest.raises(UnsupportedResolutionError):
            grid_tile_slide(slide, magnification=40.0)

    def test_footprints_inside_and_count_formula_random_geometries(self):
        # property: all footprints inside the slide; count matches the
        # closed-form floor((extent - footprint)/stride) + 1 per axis
        rng = np.random.default_rng(7)
        for _ in range(200):
            bw = int(rng.integers(50, 3000))
            bh = int(rng.integers(50, 3000))
            base_mag = float(rng.choice([20.0, 40.0]))
            patch = int(rng.choice([32, 64, 128]))
            stride = int(rng.integers(16, 257))
            slide = SlideRecord("s", "other", "unlabeled", bw, bh, base_mag)
            tiles = grid_tile_slide(slide, patch_size=patch, magnification=20.0, stride=stride)
            scale = base_mag / 20.0
            fp = patch * scale
            sb = stride * scale
            nx = math.floor((bw - fp) / sb) + 1 if bw >= fp else 0
            ny = math.floor((bh - fp) / sb) + 1 if bh >= fp else 0
            assert len(tiles) == nx * ny
            assert all(t.fits_inside(slide) for t in tiles)


class TestMaterializePatch:
    def test_identity_scale_is_raw_crop(self):
        arr = gradient_slide(1024, 1024)
        store = ArraySlideStore({"s": arr}, magnification=20.0)
        tile = TileRef("s", 512, 512, patch_size=128, magnification=20.0)
        patch = materialize_patch(tile, store)
        assert np.array_equal(patch, arr[448:576, 448:576])

    def test_factor_two_downsample_shape(self):
        arr = gradient_slide(512, 512)
        store = ArraySlideStore({"s": arr}, magnification=40.0)
        tile = TileRef("s", 256, 256, patch_size=128, magnification=20.0)
        patch = materialize_patch(tile, store)
        assert patch.shape == (128, 128, 3)
        assert patch.dtype == np.uint8

    def test_gradient_matches_brute_force_oracle(self):
        arr = gradient_slide(640, 640)
        store = ArraySlideStore({"s": arr}, magnification=40.0)
        tile = TileRef("s", 320, 320, patch_size=128, magnification=20.0)
        patch = materialize_patch(tile, store)
        # brute-force oracle: explicit python loops over 2x2 blocks
        x0 = y0 = 320 - 128  # footprint 256, so corner at center-128
        expected = np.zeros((128, 128, 3), dtype=np.uint8)
        for i in range(128):
            for j in range(128):
                block = arr[y0 + 2 * i : y0 + 2 * i + 2, x0 + 2 * j : x0 + 2 * j + 2]
                expected[i, j] = np.rint(block.reshape(4, 3).mean(axis=0))
        assert np.array_equal(patch, expected)

    def test_out_of_bounds_read_raises(self):
        arr = gradient_slide(256, 256)
        store = ArraySlideStore({"s": arr}, magnification=20.0)
        tile = TileRef("s", 10, 10, patch_size=128, magnification=20.0)
        with pytest.raises(PatchReadError) as exc:
            materialize_patch(tile, store)
        assert exc.value.slide_id == "s"


class TestTissueFilter:
    def test_mean_saturation_extremes(self):
        gray = np.full((8, 8, 3), 128, dtype=np.uint8)
        assert mean_saturation(gray) == 0.0
        pure = np.zeros((8, 8, 3), dtype=np.uint8)
        pure[..., 0] = 255
        assert mean_saturation(pure) == 1.0
        black = np.zeros((8, 8, 3), dtype=np.uint8)
        assert mean_saturation(black) == 0.0

    def test_filter_keeps_saturated_tiles_only(self):
        side = 256
        arr = np.full((side, side, 3), 245, dtype=np.uint8)  # glass
        arr[:128, :128, 0] = 180
        arr[:128, :128, 2] = 120  # pinkish tissue corner
        store = ArraySlideStore({"s": arr}, magnification=20.0)
        slide = SlideRecord("s", "other", "unlabeled", side, side, 20.0)
        tiles = grid_tile_slide(slide, patch_size=128)
        kept = filter_tissue_tiles(tiles, store, min_saturation=0.05)
        assert len(tiles) == 4
        assert len(kept) == 1
        assert kept[0].center_x == 64.0 and kept[0].center_y == 64.0
        assert filter_tissue_tiles(tiles, store, min_saturation=None) == tiles


def write_labeled_tree(root, classes, per_class=2, size=150):
    for c, name in enumerate(classes):
        d = root / name
        d.mkdir(parents=True)
        for i in range(per_class):
            arr = np.full((size, size, 3), 10 * c + i, dtype=np.uint8)
            Image.fromarray(arr).save(d / f"img_{i}.png")


class TestLoadLabeledPatches:
    def test_center_crop_window_of_150(self, tmp_path):
        # oracle: offset = floor((150-128)/2) = 11
        src = np.arange(150 * 150 * 3, dtype=np.int64).reshape(150, 150, 3) % 256
        src = src.astype(np.uint8)
        assert np.array_equal(center_crop(src, 128), src[11:139, 11:139])

    def test_128_input_unchanged(self, tmp_path):
        d = tmp_path / "background"
        d.mkdir()
        arr = np.random.default_rng(0).integers(0, 256, (128, 128, 3)).astype(np.uint8)
        Image.fromarray(arr).save(d / "a.png")
        ds, report = load_labeled_patches(tmp_path)
        assert len(ds) == 1
        assert np.array_equal(ds.images[0], arr)
        assert report.skipped == []

    def test_eight_class_enumeration(self, tmp_path):
        write_labeled_tree(tmp_path, TISSUE_CLASSES, per_class=2)
        ds, report = load_labeled_patches(tmp_path)
        assert len(ds) == 16
        assert report.loaded == 16
        for name in TISSUE_CLASSES:
            assert ds.labels.count(name) == 2

    def test_unknown_class_directory_rejected(self, tmp_path):
        (tmp_path / "mystery_tissue").mkdir()
        with pytest.raises(RecordValidationError):
            load_labeled_patches(tmp_path)

    def test_small_images_skipped_and_reported(self, tmp_path):
        d = tmp_path / "debris"
        d.mkdir()
        Image.fromarray(np.zeros((64, 64, 3), dtype=np.uint8)).save(d / "small.png")
        Image.fromarray(np.zeros((128, 128, 3), dtype=np.uint8)).save(d / "ok.png")
        ds, report = load_labeled_patches(tmp_path)
        assert len(ds) == 1
        assert len(report.skipped) == 1
        assert "small.png" in report.skipped[0][0]

    def test_ordering_is_sorted_by_path(self, tmp_path):
        write_labeled_tree(tmp_path, ("adipose_tissue", "background"), per_class=2)
        ds, _ = load_labeled_patches(tmp_path)
        assert ds.item_ids == sorted(ds.item_ids)


class TestSplitSourceTarget:
    def test_exact_150_100_per_class(self, crc_like_dataset):
        split = split_source_target(crc_like_dataset, (0.6, 0.4), seed=3)
        src_by_class = {}
        for item_id in split.source_ids:
            src_by_class.setdefault(item_id.split("/")[0], 0)
            src_by_class[item_id.split("/")[0]] += 1
        assert all(v == 150 for v in src_by_class.values())
        assert len(split.source_ids) == 1200
        assert len(split.target_ids) == 800

    def test_boundary_fraction_one(self, crc_like_dataset):
        split = split_source_target(crc_like_dataset, (1.0, 0.0), seed=0)
        assert split.target_ids == []
        assert sorted(split.source_ids) == sorted(crc_like_dataset.item_ids)

    def test_determinism(self, crc_like_dataset):
        a = split_source_target(crc_like_dataset, (0.6, 0.4), seed=11)
        b = split_source_target(crc_like_dataset, (0.6, 0.4), seed=11)
        assert a.source_ids == b.source_ids
        assert a.target_ids == b.target_ids

    def test_disjoint_covering_and_balanced_for_many_seeds(self, crc_like_dataset):
        for seed in range(5):
            split = split_source_target(crc_like_dataset, (0.6, 0.4), seed=seed)
            src, tgt = set(split.source_ids), set(split.target_ids)
            assert not src & tgt
            assert src | tgt == set(crc_like_dataset.item_ids)
            for name in TISSUE_CLASSES:
                n_src = sum(1 for i in split.source_ids if i.startswith(name))
                assert abs(n_src - 150) <= 1

    def test_singleton_class_rejected(self):
        from tests.conftest import make_labeled_set

        ds = make_labeled_set(1, ("debris", "background"))
        with pytest.raises(RecordValidationError) as exc:
            split_source_target(ds, (0.6, 0.4), seed=0)
        assert "debris" in str(exc.value) or "background" in str(exc.value)


class TestLargestRemainder:
    def test_exact_allocation(self):
        assert largest_remainder_allocation([12.5] * 8, 100) == [13, 13, 13, 13, 12, 12, 12, 12]

    def test_totals_always_exact(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            n = int(rng.integers(2, 12))
            weights = rng.random(n)
            weights /= weights.sum()
            total = int(rng.integers(1, 500))
            counts = largest_remainder_allocation(weights * total, total)
            assert sum(counts) == total
            assert all(abs(c - w * total) <= 1 for c, w in zip(counts, weights))
