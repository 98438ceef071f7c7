"""Standardization of heterogeneous pathology images and masks.

Steps mirror the preprocessing used to build the training corpus:
magnification normalization (bilinear image / nearest mask rescale),
sliding-window patching of large images with a uniform-overlap window
layout, resolution standardization of every patch, and seeded train/test
splitting recorded in JSON-lines manifests.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import cv2
import numpy as np

from .errors import (
    DimensionMismatch,
    EmptyManifest,
    EmptyPatch,
    GridMismatch,
    NonPositiveMagnification,
    ZeroOutputDimension,
)
from .taxonomy import HierLabel, parse_label

# Patching constants: images whose dimension exceeds TILE_THRESHOLD pixels
# are covered by sliding windows of WINDOW pixels with uniform overlap.
WINDOW = 1024
TILE_THRESHOLD = 1500
STANDARD_SIZE = 1024


@dataclass
class RasterImage:
    """An 8-bit RGB image with its acquisition magnification."""

    pixels: np.ndarray  # HxWx3 uint8
    magnification: float

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected HxWx3 pixels, got {self.pixels.shape}")
        if self.pixels.shape[0] < 1 or self.pixels.shape[1] < 1:
            raise ValueError("image must have at least one pixel per axis")
        if self.magnification <= 0:
            raise NonPositiveMagnification(
                f"magnification must be > 0, got {self.magnification}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass(frozen=True)
class PatchGrid:
    """Sliding-window layout along one axis: starts of [start, start+window)."""

    window: int
    starts: tuple[int, ...]
    overlap: float  # real (unrounded) overlap between consecutive windows
    extent: int  # the axis length the grid was computed for

    def __len__(self) -> int:
        return len(self.starts)


def compute_patch_grid(extent: int, window: int = WINDOW, threshold: int = TILE_THRESHOLD) -> PatchGrid:
    """Window layout covering [0, extent) along one axis.

    Dimensions up to `threshold` stay untiled (a single full-extent window).
    Larger dimensions get k = ceil(extent / window) windows whose uniform
    real overlap is (window*k - extent) / (k - 1); starts are the rounded
    multiples of the real stride, with the final window pinned to end
    exactly at `extent`.
    """
    if extent < 1:
        raise ValueError(f"axis extent must be >= 1, got {extent}")
    k = math.ceil(extent / window)
    # k == 1 can only happen with a custom threshold below the window size
    if extent <= threshold or k < 2:
        return PatchGrid(window=extent, starts=(0,), overlap=0.0, extent=extent)
    overlap = (window * k - extent) / (k - 1)
    stride = window - overlap
    starts = [int(round(i * stride)) for i in range(k - 1)]
    starts.append(extent - window)  # end-pin guarantees exact coverage
    return PatchGrid(window=window, starts=tuple(starts), overlap=overlap, extent=extent)


def rescale_to_target(
    image: RasterImage, mask: np.ndarray, target_mag: float
) -> tuple[RasterImage, np.ndarray]:
    """Rescale image (bilinear) and mask (nearest) to a target magnification.

    Output dimensions are round(D * target / source) per axis; the returned
    image carries the target magnification.
    """
    if target_mag <= 0:
        raise NonPositiveMagnification(f"target magnification must be > 0, got {target_mag}")
    mask = _check_mask(mask, image.shape)
    scale = target_mag / image.magnification
    h, w = image.shape
    out_h, out_w = round(h * scale), round(w * scale)
    if out_h < 1 or out_w < 1:
        raise ZeroOutputDimension(
            f"rescaling {h}x{w} by {scale} would give {out_h}x{out_w}"
        )
    if (out_h, out_w) == (h, w):
        return replace(image, magnification=float(target_mag)), mask.copy()
    pixels = cv2.resize(image.pixels, (out_w, out_h), interpolation=cv2.INTER_LINEAR)
    out_mask = cv2.resize(mask, (out_w, out_h), interpolation=cv2.INTER_NEAREST)
    return RasterImage(pixels, float(target_mag)), out_mask


def tile(
    image: RasterImage | np.ndarray,
    mask: np.ndarray,
    grid_y: PatchGrid,
    grid_x: PatchGrid,
) -> list[tuple[np.ndarray, np.ndarray, tuple[int, int]]]:
    """Crop the image/mask into (image patch, mask patch, (y, x) offset) triples.

    Patches are emitted row-major over the two per-axis grids; image and mask
    receive identical crops.
    """
    pixels = image.pixels if isinstance(image, RasterImage) else np.asarray(image)
    h, w = pixels.shape[0], pixels.shape[1]
    mask = _check_mask(mask, (h, w))
    if grid_y.extent != h or grid_x.extent != w:
        raise GridMismatch(
            f"grids computed for {grid_y.extent}x{grid_x.extent}, image is {h}x{w}"
        )
    out = []
    for ys in grid_y.starts:
        for xs in grid_x.starts:
            sl = (slice(ys, ys + grid_y.window), slice(xs, xs + grid_x.window))
            out.append((pixels[sl], mask[sl], (ys, xs)))
    return out


def standardize_patch(
    image_patch: np.ndarray, mask_patch: np.ndarray, size: int = STANDARD_SIZE
) -> tuple[np.ndarray, np.ndarray]:
    """Resize a patch pair to size x size (image bilinear, mask nearest)."""
    image_patch = np.asarray(image_patch)
    if image_patch.size == 0 or mask_patch.size == 0:
        raise EmptyPatch("cannot standardize an empty patch")
    mask_patch = _check_mask(mask_patch, image_patch.shape[:2])
    if image_patch.shape[0] == size and image_patch.shape[1] == size:
        return image_patch.copy(), mask_patch.copy()
    img = cv2.resize(image_patch, (size, size), interpolation=cv2.INTER_LINEAR)
    msk = cv2.resize(mask_patch, (size, size), interpolation=cv2.INTER_NEAREST)
    return img, msk


@dataclass
class ManifestEntry:
    image_path: str
    mask_path: str
    label: HierLabel
    magnification: float
    split: str = ""  # "train" | "test" | "" (unassigned)
    source: str = ""  # originating dataset, used for stratified splitting

    def to_json(self) -> dict:
        rec = {
            "image_path": self.image_path,
            "mask_path": self.mask_path,
            "label": self.label.render(),
            "magnification": self.magnification,
            "split": self.split,
        }
        if self.source:
            rec["source"] = self.source
        return rec


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)


def split_dataset(manifest: DatasetManifest, ratio: float, seed: int) -> DatasetManifest:
    """Assign train/test splits, stratified per source dataset.

    round(ratio * N) entries of each source group go to train; assignment is
    deterministic under the seed.
    """
    if not manifest.entries:
        raise EmptyManifest("cannot split an empty manifest")
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must be in (0, 1), got {ratio}")
    rng = np.random.default_rng(seed)
    groups: dict[str, list[int]] = {}
    for i, e in enumerate(manifest.entries):
        groups.setdefault(e.source, []).append(i)
    out = [replace(e) for e in manifest.entries]
    for source in sorted(groups):
        idx = np.array(groups[source])
        order = rng.permutation(len(idx))
        # Fraction keeps ratio*N exact before rounding
        n_train = round(Fraction(ratio).limit_denominator(10**6) * len(idx))
        for rank, j in enumerate(order):
            out[idx[j]].split = "train" if rank < n_train else "test"
    return DatasetManifest(out)


def write_manifest(manifest: DatasetManifest, path: str | Path, header: dict | None = None) -> None:
    """Write a manifest as JSON-lines, optionally prefixed by a provenance record."""
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json.dumps({"_provenance": header}) + "\n")
        for e in manifest.entries:
            fh.write(json.dumps(e.to_json()) + "\n")


def read_manifest(path: str | Path) -> DatasetManifest:
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "_provenance" in rec:
                continue
            entries.append(
                ManifestEntry(
                    image_path=rec["image_path"],
                    mask_path=rec["mask_path"],
                    label=parse_label(rec["label"]),
                    magnification=float(rec["magnification"]),
                    split=rec.get("split", ""),
                    source=rec.get("source", ""),
                )
            )
    if not entries:
        raise EmptyManifest(f"no entries in manifest {path}")
    return DatasetManifest(entries)


def standardize_sample(
    image: RasterImage,
    mask: np.ndarray,
    target_mag: float,
    size: int = STANDARD_SIZE,
    window: int = WINDOW,
    threshold: int = TILE_THRESHOLD,
) -> list[tuple[np.ndarray, np.ndarray, tuple[int, int]]]:
    """Full per-sample pipeline: rescale, tile per axis, standardize patches.

    Returns (image, mask, (y, x) offset) triples at the standard size; offsets
    refer to the rescaled image.
    """
    image, mask = rescale_to_target(image, mask, target_mag)
    h, w = image.shape
    grid_y = compute_patch_grid(h, window=window, threshold=threshold)
    grid_x = compute_patch_grid(w, window=window, threshold=threshold)
    out = []
    for img_p, msk_p, off in tile(image, mask, grid_y, grid_x):
        img_s, msk_s = standardize_patch(img_p, msk_p, size=size)
        out.append((img_s, msk_s, off))
    return out


def _check_mask(mask: np.ndarray, dims: tuple[int, int]) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2 or mask.shape != tuple(dims):
        raise DimensionMismatch(f"mask shape {mask.shape} does not match image {dims}")
    if mask.dtype != np.uint8:
        mask = (mask > 0).astype(np.uint8)
    elif mask.max(initial=0) > 1:
        mask = (mask > 0).astype(np.uint8)
    return mask
