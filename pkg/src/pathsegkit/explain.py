"""Segmentation-driven explainability for slide-level classifiers.

Two pipelines over bags of patches:

* classification-then-segmentation: train a standard attention-MIL
  classifier, then score each pathological object by blurring its segmented
  region and taking the ratio of perturbed to original cross-entropy.
* segmentation-then-classification: decompose patch features into per-object
  features by masked average pooling, aggregate each object across the slide
  with its own attention module, classify from the pooled slide feature, and
  read per-object activations as object-aware class activation maps.

Patch features come from a frozen feature extractor callable mapping a patch
image to an (h, w, d) feature grid; at desk scale that is the segmentation
model's patch-embedding encoder.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import cv2
import numpy as np

from .errors import DimensionMismatch, MissingObjectMasks
from .optim import Adam

FeatureExtractor = Callable[[np.ndarray], np.ndarray]  # patch image -> (h, w, d)

OTHER_OBJECT = "other"  # complement of all object masks, appended when requested

LOSS_FLOOR = 1e-8  # denominator floor for the importance ratio


@dataclass
class SlideBag:
    """A slide as a bag of patches arranged row-major on a grid."""

    slide_id: str
    patches: list[np.ndarray]  # each HxWx3 uint8
    label: int
    grid_shape: tuple[int, int]  # (rows, cols) with rows*cols == len(patches)
    object_masks: dict[str, list[np.ndarray]] = field(default_factory=dict)


@dataclass
class MILParams:
    """Attention-MIL aggregator + linear classifier.

    The classifier is bias-free so per-patch activations decompose the class
    logit exactly.
    """

    attn_w: np.ndarray  # (k, d)
    attn_b: np.ndarray  # (k,)
    attn_v: np.ndarray  # (k,)
    cls_w: np.ndarray  # (d, C)


@dataclass
class ObjectModelParams:
    """Object-aware classifier: one attention aggregator per object."""

    objects: list[str]
    aggregators: dict[str, MILParams]  # cls_w of each aggregator is unused
    cls_w: np.ndarray  # (d, C)


@dataclass
class MILTrainConfig:
    attn_hidden: int = 32
    n_classes: int = 2
    lr: float = 1e-2
    epochs: int = 100
    seed: int = 0


class PooledFeature(NamedTuple):
    vector: np.ndarray
    empty: bool  # True when the mask had no on-pixels (vector is zero)


def masked_avg_pool(grid: np.ndarray, mask: np.ndarray) -> PooledFeature:
    """Mean feature vector over mask-on positions of an (h, w, d) grid."""
    grid = np.asarray(grid, dtype=float)
    mask = np.asarray(mask)
    if grid.ndim != 3 or mask.shape != grid.shape[:2]:
        raise DimensionMismatch(f"grid {grid.shape} vs mask {mask.shape}")
    on = mask > 0
    count = int(on.sum())
    if count == 0:
        return PooledFeature(np.zeros(grid.shape[2]), True)
    return PooledFeature(grid[on].sum(axis=0) / count, False)


def spatial_avg_pool(grid: np.ndarray) -> np.ndarray:
    return np.asarray(grid, dtype=float).mean(axis=(0, 1))


def init_mil(d: int, cfg: MILTrainConfig, seed: int | None = None) -> MILParams:
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    k = cfg.attn_hidden
    bound = 1.0 / np.sqrt(d)
    return MILParams(
        attn_w=rng.uniform(-bound, bound, size=(k, d)),
        attn_b=np.zeros(k),
        attn_v=rng.uniform(-bound, bound, size=k),
        cls_w=rng.uniform(-bound, bound, size=(d, cfg.n_classes)),
    )


def mil_aggregate(features: np.ndarray, params: MILParams):
    """Attention pooling: alpha = softmax(v^T tanh(W f + b)), S = sum alpha_i f_i."""
    features = np.atleast_2d(np.asarray(features, dtype=float))
    hidden = np.tanh(features @ params.attn_w.T + params.attn_b)
    scores = hidden @ params.attn_v
    shifted = scores - scores.max()
    alpha = np.exp(shifted)
    alpha /= alpha.sum()
    return alpha @ features, alpha


def classify(slide_feature: np.ndarray, cls_w: np.ndarray) -> np.ndarray:
    """Softmax class probabilities of a slide feature (bias-free logits)."""
    logits = slide_feature @ cls_w
    shifted = np.exp(logits - logits.max())
    return shifted / shifted.sum()


def cross_entropy(label: int, probs: np.ndarray) -> float:
    return float(-np.log(max(probs[label], 1e-300)))


def _mil_backward(features, params, alpha, d_slide):
    """Gradients of the aggregator parameters given dL/dS; features frozen."""
    hidden = np.tanh(features @ params.attn_w.T + params.attn_b)
    d_alpha = features @ d_slide
    d_scores = alpha * (d_alpha - float(alpha @ d_alpha))
    d_v = hidden.T @ d_scores
    d_hidden = np.outer(d_scores, params.attn_v)
    d_pre = d_hidden * (1.0 - hidden**2)
    return d_pre.T @ features, d_pre.sum(axis=0), d_v


def extract_patch_features(bag: SlideBag, extractor: FeatureExtractor) -> np.ndarray:
    """(N, d) spatially averaged patch features of a slide."""
    return np.stack([spatial_avg_pool(extractor(p)) for p in bag.patches])


def standardize_extractor(
    extractor: FeatureExtractor, bags: Sequence[SlideBag]
) -> FeatureExtractor:
    """Wrap an extractor to emit per-channel standardized feature grids.

    Channel statistics are estimated once over all patches of the given
    bags, so the same affine map applies to later (e.g. perturbed) inputs.
    """
    cells = []
    for bag in bags:
        for patch in bag.patches:
            grid = extractor(patch)
            cells.append(grid.reshape(-1, grid.shape[-1]))
    stacked = np.concatenate(cells, axis=0)
    mu = stacked.mean(axis=0)
    sigma = stacked.std(axis=0)
    sigma[sigma == 0.0] = 1.0
    return lambda patch: (extractor(patch) - mu) / sigma


def train_standard_model(
    feature_bags: Sequence[tuple[np.ndarray, int]], d: int, cfg: MILTrainConfig
) -> MILParams:
    """Train the attention-MIL classifier on (features (N, d), label) bags."""
    params = init_mil(d, cfg)
    named = {
        "attn_w": params.attn_w, "attn_b": params.attn_b,
        "attn_v": params.attn_v, "cls_w": params.cls_w,
    }
    opt = Adam(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    for _ in range(cfg.epochs):
        for idx in rng.permutation(len(feature_bags)):
            features, label = feature_bags[idx]
            slide, alpha = mil_aggregate(features, params)
            probs = classify(slide, params.cls_w)
            d_logits = probs.copy()
            d_logits[label] -= 1.0
            d_cls = np.outer(slide, d_logits)
            d_slide = params.cls_w @ d_logits
            d_w, d_b, d_v = _mil_backward(features, params, alpha, d_slide)
            opt.step(named, {"attn_w": d_w, "attn_b": d_b, "attn_v": d_v, "cls_w": d_cls})
    return params


def predict_slide(features: np.ndarray, params: MILParams) -> np.ndarray:
    slide, _ = mil_aggregate(features, params)
    return classify(slide, params.cls_w)


def blur_region(image: np.ndarray, mask: np.ndarray, kernel_radius: int = 15) -> np.ndarray:
    """Gaussian-blur the image only where mask is on; other pixels unchanged."""
    image = np.asarray(image)
    mask = np.asarray(mask)
    if mask.shape != image.shape[:2]:
        raise DimensionMismatch(f"mask {mask.shape} vs image {image.shape[:2]}")
    if not mask.any():
        return image.copy()
    ksize = 2 * kernel_radius + 1
    blurred = cv2.GaussianBlur(image, (ksize, ksize), 0)
    out = image.copy()
    on = mask > 0
    out[on] = blurred[on]
    return out


class ImportanceResult(NamedTuple):
    imp: float
    loss_orig: float
    loss_pert: float
    floored: bool  # original loss was below the floor


def importance_ratio(loss_pert: float, loss_orig: float) -> ImportanceResult:
    """Perturbation importance: perturbed loss over original loss."""
    floored = loss_orig < LOSS_FLOOR
    denom = max(loss_orig, LOSS_FLOOR)
    return ImportanceResult(loss_pert / denom, loss_orig, loss_pert, floored)


def feature_importance(
    params: MILParams,
    bag: SlideBag,
    objects: Sequence[str],
    extractor: FeatureExtractor,
    kernel_radius: int = 15,
) -> dict[str, ImportanceResult]:
    """Per-object importance of one slide.

    For each object, its mask region is blurred in every patch, features are
    re-extracted, and the slide is re-classified; the importance is the ratio
    of the perturbed to the original cross-entropy.
    """
    features = extract_patch_features(bag, extractor)
    loss_orig = cross_entropy(bag.label, predict_slide(features, params))
    out = {}
    for obj in objects:
        if obj not in bag.object_masks:
            raise MissingObjectMasks(f"slide {bag.slide_id} lacks masks for {obj!r}")
        pert_features = features.copy()
        for i, (patch, mask) in enumerate(zip(bag.patches, bag.object_masks[obj])):
            if mask.any():
                blurred = blur_region(patch, mask, kernel_radius)
                pert_features[i] = spatial_avg_pool(extractor(blurred))
        loss_pert = cross_entropy(bag.label, predict_slide(pert_features, params))
        out[obj] = importance_ratio(loss_pert, loss_orig)
    return out


def patch_cam(features: np.ndarray, alpha: np.ndarray, cls_w: np.ndarray, c: int) -> np.ndarray:
    """Per-patch activations for class c: A_i = <w_c, alpha_i * f_i>.

    Their sum equals the class logit exactly (bias-free classifier).
    """
    return (features * alpha[:, None]) @ cls_w[:, c]


def paint_patch_map(
    activations: np.ndarray, grid_shape: tuple[int, int], patch_px: int
) -> np.ndarray:
    """Spatial map assigning each patch extent its activation value."""
    rows, cols = grid_shape
    grid = np.asarray(activations, dtype=float).reshape(rows, cols)
    return np.kron(grid, np.ones((patch_px, patch_px)))


def object_cam(slide_features: dict[str, np.ndarray], cls_w: np.ndarray, c: int) -> dict[str, float]:
    """Per-object activations for class c: A_j = <w_c, S_j>."""
    return {obj: float(vec @ cls_w[:, c]) for obj, vec in slide_features.items()}


def paint_object_map(
    activations: dict[str, float], slide_masks: dict[str, np.ndarray]
) -> np.ndarray:
    """Spatial map assigning each object's pixels its activation.

    Overlapping objects resolve to the maximum activation; pixels covered by
    no object stay 0.
    """
    shapes = {m.shape for m in slide_masks.values()}
    if len(shapes) != 1:
        raise DimensionMismatch(f"inconsistent slide mask shapes: {shapes}")
    out = np.full(shapes.pop(), -np.inf)
    for obj, mask in slide_masks.items():
        on = mask > 0
        out[on] = np.maximum(out[on], activations[obj])
    out[np.isinf(out)] = 0.0
    return out


def extract_object_features(
    bag: SlideBag,
    objects: Sequence[str],
    extractor: FeatureExtractor,
    include_other: bool = True,
) -> dict[str, np.ndarray]:
    """Per-object (N, d) features by masked pooling of each patch's grid.

    Object masks are resized (nearest) to the feature grid.  When
    include_other is set, the complement of the union of all object masks is
    pooled as an extra "other" object.
    """
    for obj in objects:
        if obj not in bag.object_masks:
            raise MissingObjectMasks(f"slide {bag.slide_id} lacks masks for {obj!r}")
    per_object: dict[str, list[np.ndarray]] = {obj: [] for obj in objects}
    if include_other:
        per_object[OTHER_OBJECT] = []
    for i, patch in enumerate(bag.patches):
        grid = extractor(patch)
        gh, gw = grid.shape[:2]
        union = np.zeros((gh, gw), dtype=np.uint8)
        for obj in objects:
            small = _resize_mask(bag.object_masks[obj][i], (gh, gw))
            union |= small
            per_object[obj].append(masked_avg_pool(grid, small).vector)
        if include_other:
            per_object[OTHER_OBJECT].append(masked_avg_pool(grid, 1 - union).vector)
    return {obj: np.stack(vecs) for obj, vecs in per_object.items()}


def object_model_forward(
    object_features: dict[str, np.ndarray], params: ObjectModelParams
):
    """Returns (probs, slide-level object features, per-object attention)."""
    slide_feats: dict[str, np.ndarray] = {}
    alphas: dict[str, np.ndarray] = {}
    for obj in params.objects:
        slide_feats[obj], alphas[obj] = mil_aggregate(
            object_features[obj], params.aggregators[obj]
        )
    pooled = np.mean([slide_feats[o] for o in params.objects], axis=0)
    return classify(pooled, params.cls_w), slide_feats, alphas


def build_object_model(
    object_feature_bags: Sequence[tuple[dict[str, np.ndarray], int]],
    objects: Sequence[str],
    d: int,
    cfg: MILTrainConfig,
) -> ObjectModelParams:
    """Train the object-aware classifier on per-object feature bags.

    One attention aggregator per object; slide feature is the average of the
    per-object slide features; cross-entropy objective.
    """
    rng_init = np.random.default_rng(cfg.seed)
    aggregators = {
        obj: init_mil(d, cfg, seed=int(rng_init.integers(2**31))) for obj in objects
    }
    cls_w = rng_init.uniform(-1.0 / np.sqrt(d), 1.0 / np.sqrt(d), size=(d, cfg.n_classes))
    params = ObjectModelParams(list(objects), aggregators, cls_w)

    named: dict[str, np.ndarray] = {"cls_w": params.cls_w}
    for obj, agg in aggregators.items():
        named[f"{obj}/attn_w"] = agg.attn_w
        named[f"{obj}/attn_b"] = agg.attn_b
        named[f"{obj}/attn_v"] = agg.attn_v
    opt = Adam(lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    n_obj = len(params.objects)
    for _ in range(cfg.epochs):
        for idx in rng.permutation(len(object_feature_bags)):
            feats, label = object_feature_bags[idx]
            probs, slide_feats, alphas = object_model_forward(feats, params)
            d_logits = probs.copy()
            d_logits[label] -= 1.0
            pooled = np.mean([slide_feats[o] for o in params.objects], axis=0)
            grads = {"cls_w": np.outer(pooled, d_logits)}
            d_pooled = params.cls_w @ d_logits
            d_slide = d_pooled / n_obj
            for obj in params.objects:
                d_w, d_b, d_v = _mil_backward(
                    feats[obj], params.aggregators[obj], alphas[obj], d_slide
                )
                grads[f"{obj}/attn_w"] = d_w
                grads[f"{obj}/attn_b"] = d_b
                grads[f"{obj}/attn_v"] = d_v
            opt.step(named, grads)
    return params


def stitch_patches(bag: SlideBag) -> np.ndarray:
    """Assemble the slide canvas from its patch grid (row-major)."""
    rows, cols = bag.grid_shape
    strips = [
        np.concatenate(bag.patches[r * cols : (r + 1) * cols], axis=1)
        for r in range(rows)
    ]
    return np.concatenate(strips, axis=0)


def stitch_object_masks(bag: SlideBag, obj: str) -> np.ndarray:
    rows, cols = bag.grid_shape
    masks = bag.object_masks[obj]
    strips = [
        np.concatenate(masks[r * cols : (r + 1) * cols], axis=1) for r in range(rows)
    ]
    return np.concatenate(strips, axis=0)


def cam_overlay(canvas: np.ndarray, cam_map: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a red(high)/blue(low) rendering of the map onto the slide image."""
    lo, hi = float(cam_map.min()), float(cam_map.max())
    norm = np.zeros_like(cam_map) if hi == lo else (cam_map - lo) / (hi - lo)
    heat = np.zeros(cam_map.shape + (3,), dtype=float)
    heat[..., 0] = 255.0 * norm
    heat[..., 2] = 255.0 * (1.0 - norm)
    out = (1.0 - alpha) * canvas.astype(float) + alpha * heat
    return np.clip(out, 0, 255).astype(np.uint8)


def write_importance_report(
    rows: Sequence[dict], path: str | Path, header: str | None = None
) -> None:
    """CSV rows: object_label, class, mean_imp, n_slides."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        writer = csv.DictWriter(fh, fieldnames=["object_label", "class", "mean_imp", "n_slides"])
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def write_activation_json(activations: dict[str, float], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(activations, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _resize_mask(mask: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    mask = (np.asarray(mask) > 0).astype(np.uint8)
    if mask.shape == tuple(out_hw):
        return mask
    return cv2.resize(mask, (out_hw[1], out_hw[0]), interpolation=cv2.INTER_NEAREST)
