"""Tests for the data standardization pipeline."""

import math

import numpy as np
import pytest

from pathsegkit.errors import (
    EmptyManifest,
    EmptyPatch,
    GridMismatch,
    NonPositiveMagnification,
    ZeroOutputDimension,
)
from pathsegkit.pipeline import (
    DatasetManifest,
    ManifestEntry,
    RasterImage,
    compute_patch_grid,
    read_manifest,
    rescale_to_target,
    split_dataset,
    standardize_patch,
    standardize_sample,
    tile,
    write_manifest,
)
from pathsegkit.taxonomy import parse_label


def flood_fill_count(mask: np.ndarray, min_size: int = 1) -> int:
    """Independent 8-connectivity component counter (iterative flood fill)."""
    mask = mask > 0
    seen = np.zeros_like(mask, dtype=bool)
    h, w = mask.shape
    count = 0
    for sy in range(h):
        for sx in range(w):
            if not mask[sy, sx] or seen[sy, sx]:
                continue
            stack = [(sy, sx)]
            seen[sy, sx] = True
            size = 0
            while stack:
                y, x = stack.pop()
                size += 1
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
            if size >= min_size:
                count += 1
    return count


class TestComputePatchGrid:
    def test_d2000(self):
        g = compute_patch_grid(2000)
        assert len(g) == 2
        assert g.overlap == 48.0
        assert g.starts == (0, 976)

    def test_d3000(self):
        g = compute_patch_grid(3000)
        assert len(g) == 3
        assert g.overlap == 36.0
        assert g.starts == (0, 988, 1976)
        assert g.starts[-1] + g.window == 3000

    def test_below_threshold_untiled(self):
        g = compute_patch_grid(1400)
        assert g.starts == (0,)
        assert g.window == 1400

    def test_exact_multiple(self):
        g = compute_patch_grid(2048)
        assert g.starts == (0, 1024)
        assert g.overlap == 0.0

    def test_custom_window_and_threshold(self):
        g = compute_patch_grid(500, window=256, threshold=300)
        assert len(g.starts) == 2
        assert g.starts[-1] + 256 == 500
        # threshold below the window size: one window still covers the axis
        g = compute_patch_grid(800, window=1024, threshold=500)
        assert g.starts == (0,)
        assert g.window == 800

    def test_coverage_exhaustive(self):
        # every D in (1500, 6000]: full coverage, exact final end, overlap
        # within 1 px of the closed-form value
        for d in range(1501, 6001):
            g = compute_patch_grid(d)
            k = math.ceil(d / 1024)
            assert len(g.starts) == k
            assert g.starts[0] == 0
            assert g.starts[-1] + 1024 == d
            expected_overlap = (1024 * k - d) / (k - 1)
            for a, b in zip(g.starts, g.starts[1:]):
                assert b >= a  # monotone
                assert b <= a + 1024  # no gaps
                realized = a + 1024 - b
                assert abs(realized - expected_overlap) < 1.0


class TestRescale:
    def _pair(self, h, w, mag, seed=0):
        rng = np.random.default_rng(seed)
        img = RasterImage(rng.integers(0, 255, (h, w, 3), dtype=np.uint8), mag)
        mask = (rng.random((h, w)) < 0.2).astype(np.uint8)
        return img, mask

    def test_upscale_2x(self):
        img, mask = self._pair(500, 500, 20)
        out_img, out_mask = rescale_to_target(img, mask, 40)
        assert out_img.shape == (1000, 1000)
        assert out_mask.shape == (1000, 1000)
        assert out_img.magnification == 40

    def test_identity(self):
        img, mask = self._pair(1000, 1000, 40)
        out_img, out_mask = rescale_to_target(img, mask, 40)
        assert np.array_equal(out_img.pixels, img.pixels)
        assert np.array_equal(out_mask, mask)

    def test_downscale_100x_to_40x(self):
        img, mask = self._pair(1000, 1000, 100)
        out_img, _ = rescale_to_target(img, mask, 40)
        assert out_img.shape == (400, 400)

    def test_mask_stays_binary(self):
        img, mask = self._pair(333, 451, 20, seed=3)
        for target in (40, 10, 55):
            _, out_mask = rescale_to_target(img, mask, target)
            assert set(np.unique(out_mask)) <= {0, 1}

    def test_bad_magnification(self):
        img, mask = self._pair(10, 10, 40)
        with pytest.raises(NonPositiveMagnification):
            rescale_to_target(img, mask, 0)
        with pytest.raises(NonPositiveMagnification):
            RasterImage(img.pixels, -1)

    def test_zero_output(self):
        img, mask = self._pair(10, 10, 1000)
        with pytest.raises(ZeroOutputDimension):
            rescale_to_target(img, mask, 1)

    def test_integer_upscale_preserves_component_count(self):
        rng = np.random.default_rng(9)
        for trial in range(20):
            mask = (rng.random((48, 48)) < 0.25).astype(np.uint8)
            img = RasterImage(
                rng.integers(0, 255, (48, 48, 3), dtype=np.uint8), 20
            )
            _, up = rescale_to_target(img, mask, 40)  # 2x integer upscale
            assert flood_fill_count(up) == flood_fill_count(mask)


class TestTile:
    def test_mixed_axes(self):
        rng = np.random.default_rng(0)
        img = RasterImage(rng.integers(0, 255, (2000, 1400, 3), dtype=np.uint8), 40)
        mask = (rng.random((2000, 1400)) < 0.5).astype(np.uint8)
        gy = compute_patch_grid(2000)
        gx = compute_patch_grid(1400)
        patches = tile(img, mask, gy, gx)
        assert len(patches) == 2
        for img_p, msk_p, off in patches:
            assert img_p.shape == (1024, 1400, 3)
            assert msk_p.shape == (1024, 1400)
        assert patches[0][2] == (0, 0)
        assert patches[1][2] == (976, 0)

    def test_single_patch_identity(self):
        rng = np.random.default_rng(1)
        img = RasterImage(rng.integers(0, 255, (1024, 1024, 3), dtype=np.uint8), 40)
        mask = np.zeros((1024, 1024), dtype=np.uint8)
        patches = tile(img, mask, compute_patch_grid(1024), compute_patch_grid(1024))
        assert len(patches) == 1
        assert np.array_equal(patches[0][0], img.pixels)

    def test_grid_product(self):
        rng = np.random.default_rng(2)
        img = RasterImage(rng.integers(0, 255, (3000, 2000, 3), dtype=np.uint8), 40)
        mask = np.zeros((3000, 2000), dtype=np.uint8)
        patches = tile(img, mask, compute_patch_grid(3000), compute_patch_grid(2000))
        assert len(patches) == 6

    def test_grid_mismatch(self):
        rng = np.random.default_rng(3)
        img = RasterImage(rng.integers(0, 255, (100, 100, 3), dtype=np.uint8), 40)
        mask = np.zeros((100, 100), dtype=np.uint8)
        with pytest.raises(GridMismatch):
            tile(img, mask, compute_patch_grid(200), compute_patch_grid(100))

    def test_identical_cropping(self):
        rng = np.random.default_rng(4)
        img = RasterImage(rng.integers(0, 255, (1600, 1700, 3), dtype=np.uint8), 40)
        mask = (rng.random((1600, 1700)) < 0.5).astype(np.uint8)
        gy, gx = compute_patch_grid(1600), compute_patch_grid(1700)
        for img_p, msk_p, (oy, ox) in tile(img, mask, gy, gx):
            assert np.array_equal(img_p, img.pixels[oy : oy + img_p.shape[0], ox : ox + img_p.shape[1]])
            assert np.array_equal(msk_p, mask[oy : oy + msk_p.shape[0], ox : ox + msk_p.shape[1]])


class TestStandardizePatch:
    def test_identity_bit_exact(self):
        rng = np.random.default_rng(5)
        img = rng.integers(0, 255, (1024, 1024, 3), dtype=np.uint8)
        mask = (rng.random((1024, 1024)) < 0.5).astype(np.uint8)
        out_img, out_mask = standardize_patch(img, mask)
        assert np.array_equal(out_img, img)
        assert np.array_equal(out_mask, mask)

    def test_constant_mask_invariant(self):
        img = np.zeros((512, 512, 3), dtype=np.uint8)
        mask = np.ones((512, 512), dtype=np.uint8)
        _, out_mask = standardize_patch(img, mask)
        assert out_mask.shape == (1024, 1024)
        assert out_mask.min() == 1

    def test_odd_shape(self):
        rng = np.random.default_rng(6)
        img = rng.integers(0, 255, (700, 900, 3), dtype=np.uint8)
        mask = (rng.random((700, 900)) < 0.5).astype(np.uint8)
        out_img, out_mask = standardize_patch(img, mask)
        assert out_img.shape == (1024, 1024, 3)
        assert out_mask.shape == (1024, 1024)
        assert set(np.unique(out_mask)) <= {0, 1}

    def test_empty_patch(self):
        with pytest.raises(EmptyPatch):
            standardize_patch(np.zeros((0, 5, 3), dtype=np.uint8), np.zeros((0, 5), dtype=np.uint8))


def _manifest(n, source=""):
    lb = parse_label("colon-tissue-gland")
    return DatasetManifest(
        [ManifestEntry(f"img{i}.png", f"msk{i}.png", lb, 40.0, source=source) for i in range(n)]
    )


class TestSplitDataset:
    def test_counts_10(self):
        out = split_dataset(_manifest(10), 0.8, seed=7)
        splits = [e.split for e in out.entries]
        assert splits.count("train") == 8
        assert splits.count("test") == 2

    def test_counts_5(self):
        out = split_dataset(_manifest(5), 0.8, seed=7)
        assert [e.split for e in out.entries].count("train") == 4

    def test_deterministic(self):
        a = split_dataset(_manifest(50), 0.8, seed=3)
        b = split_dataset(_manifest(50), 0.8, seed=3)
        assert [e.split for e in a.entries] == [e.split for e in b.entries]

    def test_stratified_by_source(self):
        entries = _manifest(10, source="a").entries + _manifest(10, source="b").entries
        out = split_dataset(DatasetManifest(entries), 0.8, seed=1)
        for src in ("a", "b"):
            group = [e.split for e in out.entries if e.source == src]
            assert group.count("train") == 8

    def test_empty(self):
        with pytest.raises(EmptyManifest):
            split_dataset(DatasetManifest([]), 0.8, seed=0)


def test_manifest_roundtrip(tmp_path):
    manifest = split_dataset(_manifest(6, source="synthetic"), 0.5, seed=2)
    path = tmp_path / "manifest.jsonl"
    write_manifest(manifest, path, header={"tool": "test"})
    back = read_manifest(path)
    assert len(back) == 6
    assert [e.split for e in back.entries] == [e.split for e in manifest.entries]
    assert back.entries[0].label.render() == "colon-tissue-gland"
    assert back.entries[0].source == "synthetic"


def test_standardize_sample_end_to_end():
    rng = np.random.default_rng(8)
    img = RasterImage(rng.integers(0, 255, (1000, 1000, 3), dtype=np.uint8), 20)
    mask = (rng.random((1000, 1000)) < 0.3).astype(np.uint8)
    # rescales to 2000x2000 at 40x, then tiles 2x2, standardizes each
    patches = standardize_sample(img, mask, 40.0)
    assert len(patches) == 4
    for img_p, msk_p, _ in patches:
        assert img_p.shape == (1024, 1024, 3)
        assert msk_p.shape == (1024, 1024)
