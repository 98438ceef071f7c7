"""Synthetic shapes-on-noise corpora so tests and demos need no external data.

Three prompt categories with distinct shapes and color casts:

    unspecified-tissue-disk     filled disks, reddish
    unspecified-cell-square     filled squares, greenish
    unspecified-nuclei-cross    plus signs, bluish

Each image carries one or two instances of its category plus (usually) a
distractor shape from another category, so segmentation genuinely depends on
the prompt.  Slide-bag generation reuses the same shapes for two synthetic
diagnosis classes distinguished by which shape dominates the slide.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .explain import SlideBag
from .imgio import save_image, save_mask
from .model.training import SampleTriple
from .pipeline import DatasetManifest, ManifestEntry, split_dataset, write_manifest
from .taxonomy import parse_label

CATEGORIES = (
    "unspecified-tissue-disk",
    "unspecified-cell-square",
    "unspecified-nuclei-cross",
)

_BASE_COLOR = np.array([120.0, 120.0, 120.0])
_SHAPE_COLORS = {
    "disk": np.array([200.0, 95.0, 95.0]),
    "square": np.array([95.0, 200.0, 95.0]),
    "cross": np.array([95.0, 95.0, 200.0]),
}


def _draw_shape(size: int, kind: str, rng: np.random.Generator) -> np.ndarray:
    """Binary mask of one random instance of the given shape kind.

    Extents scale with the canvas so shapes fit on small patches too.
    """
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "disk":
        r = int(rng.integers(max(2, size // 8), max(3, size // 4 - 1)))
        cy, cx = rng.integers(r, size - r, size=2)
        return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.uint8)
    if kind == "square":
        half = int(rng.integers(max(1, size // 9), max(2, size // 5 + 1)))
        cy, cx = rng.integers(half, size - half, size=2)
        return ((np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)).astype(np.uint8)
    if kind == "cross":
        arm = int(rng.integers(max(2, size // 7), max(3, size // 4 - 1)))
        th = int(rng.integers(max(2, size // 21), max(3, size // 16) + 1))
        cy, cx = rng.integers(arm, size - arm, size=2)
        horiz = (np.abs(yy - cy) <= th) & (np.abs(xx - cx) <= arm)
        vert = (np.abs(xx - cx) <= th) & (np.abs(yy - cy) <= arm)
        return (horiz | vert).astype(np.uint8)
    raise ValueError(f"unknown shape kind {kind!r}")


def make_sample(size: int, category: str, rng: np.random.Generator, distractor: bool = True):
    """One (image, mask) pair: category shape(s) plus an optional distractor."""
    kind = category.rsplit("-", 1)[1]
    mask = _draw_shape(size, kind, rng)
    if rng.random() < 0.3:  # sometimes a second instance of the category
        extra = _draw_shape(size, kind, rng)
        if not (extra & mask).any():
            mask |= extra
    canvas = np.tile(_BASE_COLOR, (size, size, 1))
    canvas[mask > 0] = _SHAPE_COLORS[kind]
    if distractor:
        occupied = mask.copy()
        for other_kind in sorted(k for k in _SHAPE_COLORS if k != kind):
            for _ in range(10):  # distractors must not touch other shapes
                d_mask = _draw_shape(size, other_kind, rng)
                if not (d_mask & occupied).any():
                    canvas[d_mask > 0] = _SHAPE_COLORS[other_kind]
                    occupied |= d_mask
                    break
    canvas += rng.normal(0.0, 12.0, size=canvas.shape)
    image = np.clip(canvas, 0, 255).astype(np.uint8)
    return image, mask


def make_corpus(
    n: int = 200, size: int = 64, seed: int = 0, distractors: bool = True
) -> list[SampleTriple]:
    """In-memory corpus cycling through the three categories."""
    rng = np.random.default_rng(seed)
    labels = [parse_label(c) for c in CATEGORIES]
    samples = []
    for i in range(n):
        label = labels[i % len(labels)]
        image, mask = make_sample(size, label.render(), rng, distractor=distractors)
        samples.append(SampleTriple(image=image, mask=mask, label=label))
    return samples


def write_corpus(
    out_dir: str | Path,
    n: int = 200,
    size: int = 64,
    seed: int = 0,
    split_ratio: float = 0.8,
    distractors: bool = True,
    magnification: float = 40.0,
    header: dict | None = None,
) -> Path:
    """Write images/, masks/ and a split manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    samples = make_corpus(n=n, size=size, seed=seed, distractors=distractors)
    entries = []
    for i, s in enumerate(samples):
        img_rel = f"images/sample_{i:04d}.png"
        msk_rel = f"masks/sample_{i:04d}.png"
        save_image(s.image, out_dir / img_rel)
        save_mask(s.mask, out_dir / msk_rel)
        entries.append(
            ManifestEntry(
                image_path=img_rel,
                mask_path=msk_rel,
                label=s.label,
                magnification=magnification,
                source="synthetic",
            )
        )
    manifest = split_dataset(DatasetManifest(entries), split_ratio, seed)
    manifest_path = out_dir / "manifest.jsonl"
    write_manifest(manifest, manifest_path, header=header)
    return manifest_path


BAG_OBJECTS = ("unspecified-tissue-disk", "unspecified-cell-square")


def make_bags(
    n_slides: int = 24,
    patches_per_slide: int = 9,
    patch_size: int = 32,
    seed: int = 0,
) -> list[SlideBag]:
    """Two-class slide bags for the explainability pipelines.

    Class 0 slides are dominated by disk patches, class 1 by square patches;
    cross shapes appear in both as a non-discriminative object.  Object masks
    are recorded per patch for both discriminative categories.
    """
    rng = np.random.default_rng(seed)
    rows = int(np.floor(np.sqrt(patches_per_slide)))
    cols = int(np.ceil(patches_per_slide / rows))
    n_patches = rows * cols
    bags = []
    for s in range(n_slides):
        label = s % 2
        dominant = "disk" if label == 0 else "square"
        minor = "square" if label == 0 else "disk"
        patches, disk_masks, square_masks = [], [], []
        for _ in range(n_patches):
            kind = dominant if rng.random() < 0.8 else minor
            canvas = np.tile(_BASE_COLOR, (patch_size, patch_size, 1))
            mask = _draw_shape(patch_size, kind, rng)
            canvas[mask > 0] = _SHAPE_COLORS[kind]
            if rng.random() < 0.3:  # non-discriminative clutter
                cmask = _draw_shape(patch_size, "cross", rng)
                cmask &= 1 - mask
                canvas[cmask > 0] = _SHAPE_COLORS["cross"]
            canvas += rng.normal(0.0, 8.0, size=canvas.shape)
            patches.append(np.clip(canvas, 0, 255).astype(np.uint8))
            disk_masks.append(mask if kind == "disk" else np.zeros_like(mask))
            square_masks.append(mask if kind == "square" else np.zeros_like(mask))
        bags.append(
            SlideBag(
                slide_id=f"slide_{s:03d}",
                patches=patches,
                label=label,
                grid_shape=(rows, cols),
                object_masks={
                    BAG_OBJECTS[0]: disk_masks,
                    BAG_OBJECTS[1]: square_masks,
                },
            )
        )
    return bags
