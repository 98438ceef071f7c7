"""Segmentation scoring and object-characteristic metrics.

Provides the overlap score used for evaluation plus four mask descriptors
(shape irregularity, instance ratio, instance count, instance dispersion),
percentile-bootstrap confidence intervals, and density-weighted trend bins.

Instances are 8-connected components of the binary mask; components smaller
than MIN_INSTANCE_SIZE pixels are treated as annotation noise and dropped.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from scipy import ndimage

from .errors import BadEdges, DimensionMismatch, EmptyMask, EmptyScores

MIN_INSTANCE_SIZE = 36  # pixels; smaller connected components are ignored

# 8-connectivity: diagonal neighbours belong to the same component
_STRUCTURE_8 = np.ones((3, 3), dtype=int)


@dataclass(frozen=True)
class Instance:
    pixel_count: int
    centroid: tuple[float, float]  # (row, col)


def as_binary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DimensionMismatch(f"mask must be 2-D, got shape {mask.shape}")
    return mask > 0


def extract_instances(mask: np.ndarray, min_size: int = MIN_INSTANCE_SIZE) -> list[Instance]:
    """8-connected components of the mask with at least min_size pixels."""
    binary = as_binary(mask)
    labeled, n = ndimage.label(binary, structure=_STRUCTURE_8)
    if n == 0:
        return []
    counts = np.bincount(labeled.ravel())[1:]
    keep = np.flatnonzero(counts >= min_size) + 1
    if keep.size == 0:
        return []
    centroids = ndimage.center_of_mass(binary, labeled, keep)
    return [
        Instance(pixel_count=int(counts[k - 1]), centroid=(float(cy), float(cx)))
        for k, (cy, cx) in zip(keep, centroids)
    ]


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """Overlap score 2|A∩B| / (|A|+|B|), in [0, 1].

    Both masks empty counts as a perfect score of 1.0; empty vs non-empty
    scores 0.0.
    """
    pred_b, gt_b = as_binary(pred), as_binary(gt)
    if pred_b.shape != gt_b.shape:
        raise DimensionMismatch(f"pred {pred_b.shape} vs gt {gt_b.shape}")
    total = int(pred_b.sum()) + int(gt_b.sum())
    if total == 0:
        return 1.0
    inter = int(np.logical_and(pred_b, gt_b).sum())
    return 2.0 * inter / total


def perimeter_pixel_count(mask: np.ndarray) -> int:
    """Number of foreground pixels with a 4-neighbour outside the foreground.

    Pixels on the image border count as boundary along the missing side.
    """
    binary = as_binary(mask)
    padded = np.pad(binary, 1, mode="constant", constant_values=False)
    interior = (
        padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    )
    return int((binary & ~interior).sum())


def irregularity(mask: np.ndarray) -> float:
    """Deviation of the mask shape from a perfect disk: 1 - 4*pi*A/P^2.

    Area is the foreground pixel count, P the boundary-pixel count.  The raw
    value is clamped to [0, 1]: digital disks can make 4*pi*A/P^2 slightly
    exceed 1.
    """
    binary = as_binary(mask)
    area = int(binary.sum())
    if area == 0:
        raise EmptyMask("irregularity of an empty mask is undefined")
    perim = perimeter_pixel_count(binary)
    value = 1.0 - 4.0 * math.pi * area / (perim * perim)
    return min(max(value, 0.0), 1.0)


def instance_ratio(mask: np.ndarray, min_size: int = MIN_INSTANCE_SIZE) -> float:
    """Mean over instances of instance area / image area, in (0, 1]."""
    binary = as_binary(mask)
    instances = extract_instances(binary, min_size=min_size)
    if not instances:
        raise EmptyMask("no instances survive the size filter")
    image_area = binary.size
    return float(np.mean([inst.pixel_count / image_area for inst in instances]))


def instance_count(mask: np.ndarray, min_size: int = MIN_INSTANCE_SIZE) -> int:
    """Number of 8-connected components with at least min_size pixels."""
    return len(extract_instances(mask, min_size=min_size))


class DispersionResult(NamedTuple):
    value: float
    defined: bool  # False when fewer than two instances survive


def instance_dispersion(
    mask: np.ndarray, min_size: int = MIN_INSTANCE_SIZE
) -> DispersionResult:
    """Maximum pairwise Euclidean distance between instance centroids.

    With fewer than two surviving instances the distance is undefined;
    (0.0, defined=False) is returned.
    """
    instances = extract_instances(mask, min_size=min_size)
    if len(instances) < 2:
        return DispersionResult(0.0, False)
    pts = np.array([inst.centroid for inst in instances])
    diff = pts[:, None, :] - pts[None, :, :]
    dists = np.sqrt((diff**2).sum(axis=2))
    return DispersionResult(float(dists.max()), True)


class BootstrapCI(NamedTuple):
    mean: float
    lo: float
    hi: float


def bootstrap_ci(
    scores: Sequence[float],
    resamples: int = 1000,
    level: float = 0.95,
    seed: int = 0,
) -> BootstrapCI:
    """Percentile-bootstrap confidence interval of the mean.

    Deterministic under the seed; `mean` is the plain sample mean.
    """
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise EmptyScores("bootstrap over an empty score list")
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level must be in (0, 1), got {level}")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, scores.size, size=(resamples, scores.size))
    means = scores[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(means, [alpha, 1.0 - alpha])
    return BootstrapCI(float(scores.mean()), float(lo), float(hi))


@dataclass(frozen=True)
class TrendBin:
    lo: float
    hi: float
    avg_x: float  # density-weighted mean of the binned x values (nan when empty)
    avg_y: float  # density-weighted mean of the paired scores (nan when empty)
    n: int


def gaussian_kde_weights(x: np.ndarray) -> np.ndarray:
    """Normalized per-point weights from a Gaussian KDE over x.

    Bandwidth follows Scott's rule, std(x) * n^(-1/5).  Degenerate inputs
    (single point or zero variance) fall back to uniform weights.
    """
    x = np.asarray(x, dtype=float)
    n = x.size
    std = x.std()
    if n < 2 or std == 0.0:
        return np.full(n, 1.0 / n)
    h = std * n ** (-1.0 / 5.0)
    u = (x[:, None] - x[None, :]) / h
    density = np.exp(-0.5 * u**2).sum(axis=1) / (n * h * math.sqrt(2.0 * math.pi))
    return density / density.sum()


def binned_trend(
    samples: Sequence[tuple[float, float]], edges: Sequence[float]
) -> list[TrendBin]:
    """Per-bin density-weighted averages of (x, score) pairs.

    Each sample falls into the half-open bin [edges[i], edges[i+1]) or is
    dropped; within a bin, weights come from a Gaussian KDE over the x values
    so dense clusters dominate the bin average.  Empty bins are reported with
    n=0 and NaN averages.
    """
    edges = np.asarray(edges, dtype=float)
    if edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise BadEdges("edges must be strictly increasing with at least two values")
    xs = np.array([s[0] for s in samples], dtype=float)
    ys = np.array([s[1] for s in samples], dtype=float)
    out = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        in_bin = (xs >= lo) & (xs < hi)
        n = int(in_bin.sum())
        if n == 0:
            out.append(TrendBin(float(lo), float(hi), math.nan, math.nan, 0))
            continue
        w = gaussian_kde_weights(xs[in_bin])
        out.append(
            TrendBin(
                float(lo),
                float(hi),
                float(w @ xs[in_bin]),
                float(w @ ys[in_bin]),
                n,
            )
        )
    return out


REPORT_COLUMNS = (
    "sample_id",
    "label",
    "dice",
    "irregularity",
    "instance_ratio",
    "instance_count",
    "instance_dispersion",
)


def write_metric_report(rows: list[dict], path: str | Path, header: str | None = None) -> None:
    """Write per-sample metric rows as CSV (see REPORT_COLUMNS)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in REPORT_COLUMNS})


def write_trend_table(bins: list[TrendBin], path: str | Path, header: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        writer = csv.writer(fh)
        writer.writerow(["interval_lo", "interval_hi", "avg_x", "avg_dice", "n"])
        for b in bins:
            writer.writerow([b.lo, b.hi, b.avg_x, b.avg_y, b.n])
