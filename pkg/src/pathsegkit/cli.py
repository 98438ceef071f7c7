"""Command-line entry points.

Subcommands: standardize, evaluate, boxes, train, predict, explain,
gen-synthetic, report.  Every command accepts --seed and --config (a JSON
file of command-specific settings; unknown keys are rejected) and logs its
resolved configuration next to its outputs.  Verbosity comes from the
PATHSEGKIT_LOG environment variable (DEBUG/INFO/WARNING/ERROR).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, boxes as boxes_mod, explain, imgio, metrics, synthetic
from .errors import ConfigError, EmptyManifest, MissingPrediction, PathsegkitError
from .model import (
    ModelConfig,
    Vocabulary,
    evaluate_dice,
    load_checkpoint,
    predict_mask,
    save_checkpoint,
    train as train_model,
)
from .model.training import SampleTriple
from .pipeline import (
    DatasetManifest,
    ManifestEntry,
    RasterImage,
    read_manifest,
    standardize_sample,
    write_manifest,
)

log = logging.getLogger("pathsegkit")

# keys each command may receive from --config
_CONFIG_KEYS = {
    "standardize": {"target_mag", "size", "window", "threshold"},
    "evaluate": {"resamples", "level"},
    "boxes": {"kind", "min_size"},
    "train": set(ModelConfig().to_dict()) | {"eval_every", "target_dice", "split"},
    "predict": {"threshold"},
    "explain": {"mode", "attn_hidden", "lr", "epochs", "kernel_radius", "include_other"},
    "gen-synthetic": {"kind", "n", "size", "split_ratio", "n_slides", "patches_per_slide", "patch_size"},
    "report": {"edges", "min_size", "resamples", "level"},
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=os.environ.get("PATHSEGKIT_LOG", "INFO").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except PathsegkitError as exc:
        log.error("%s", exc)
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pathsegkit", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("standardize", help="rescale, tile and resize a dataset")
    common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--target-mag", type=float, default=40.0)
    p.add_argument("--size", type=int, default=1024, help="standardized patch side")
    p.set_defaults(func=cmd_standardize)

    p = sub.add_parser("evaluate", help="score predictions against a manifest")
    common(p)
    p.add_argument("--pred-dir", type=Path, required=True)
    p.add_argument("--manifest", type=Path, required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("boxes", help="derive oracle box prompts from masks")
    common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--kind", choices=["union", "instance"], default="union")
    p.set_defaults(func=cmd_boxes)

    p = sub.add_parser("train", help="train the toy segmentation model")
    common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment one image from a text prompt")
    common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--prompt", type=str, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("explain", help="feature importance / activation maps")
    common(p)
    p.add_argument("--bags", type=Path, required=True, help="slide-bag directory")
    p.add_argument("--mode", choices=["importance", "cam"], default="importance")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic corpus")
    common(p)
    p.add_argument("--kind", choices=["segmentation", "bags"], default="segmentation")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("report", help="object-characteristic metrics and trends")
    common(p)
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--pred-dir", type=Path, default=None)
    p.set_defaults(func=cmd_report)
    return parser


def load_run_config(args, command: str) -> dict:
    """Merge the --config file into a dict, rejecting unknown keys."""
    cfg: dict = {}
    if args.config is not None:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
        unknown = set(cfg) - _CONFIG_KEYS[command]
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
    cfg["seed"] = args.seed
    return cfg


def provenance(cfg: dict) -> dict:
    blob = json.dumps(cfg, sort_keys=True, default=str).encode()
    return {
        "tool": "pathsegkit",
        "version": __version__,
        "config_hash": hashlib.sha256(blob).hexdigest()[:16],
    }


def log_resolved_config(out_dir: Path, command: str, cfg: dict) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    head = provenance(cfg)
    with open(out_dir / f"{command}_run.json", "w", encoding="utf-8") as fh:
        json.dump({"command": command, "provenance": head, "config": cfg}, fh, indent=2, default=str)
        fh.write("\n")
    return head


def _content_hash(paths: list[Path], extra: str) -> str:
    h = hashlib.sha256(extra.encode())
    for p in paths:
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def cmd_standardize(args) -> int:
    cfg = load_run_config(args, "standardize")
    cfg.setdefault("target_mag", args.target_mag)
    cfg.setdefault("size", args.size)
    head = log_resolved_config(args.out, "standardize", cfg)
    manifest = read_manifest(args.manifest)
    base = args.manifest.parent
    (args.out / "images").mkdir(parents=True, exist_ok=True)
    (args.out / "masks").mkdir(parents=True, exist_ok=True)
    index_path = args.out / "standardize_index.json"
    index = json.loads(index_path.read_text()) if index_path.exists() else {}

    def process(item):
        i, entry = item
        img_path = base / entry.image_path
        msk_path = base / entry.mask_path
        stem = Path(entry.image_path).stem
        digest = _content_hash([img_path, msk_path], json.dumps(cfg, sort_keys=True))
        prior = index.get(stem)
        if prior and prior["hash"] == digest and all(
            (args.out / rel).exists() for pair in prior["patches"] for rel in pair
        ):
            log.debug("skip %s (unchanged)", stem)
            return stem, digest, prior["patches"], [
                ManifestEntry(pair[0], pair[1], entry.label, cfg["target_mag"], entry.split, entry.source)
                for pair in prior["patches"]
            ], None
        try:
            image = RasterImage(imgio.load_image(img_path), entry.magnification)
            mask = imgio.load_mask(msk_path)
            patches = standardize_sample(
                image, mask, cfg["target_mag"], size=cfg["size"],
                window=cfg.get("window", 1024), threshold=cfg.get("threshold", 1500),
            )
        except Exception as exc:  # per-sample failures are collected
            return stem, digest, None, None, f"{stem}: {exc}"
        rels, entries = [], []
        for k, (img_p, msk_p, _off) in enumerate(patches):
            img_rel = f"images/{stem}_p{k:02d}.png"
            msk_rel = f"masks/{stem}_p{k:02d}.png"
            imgio.save_image(img_p, args.out / img_rel)
            imgio.save_mask(msk_p, args.out / msk_rel)
            rels.append([img_rel, msk_rel])
            entries.append(
                ManifestEntry(img_rel, msk_rel, entry.label, cfg["target_mag"], entry.split, entry.source)
            )
        return stem, digest, rels, entries, None

    failures, out_entries = [], []
    with ThreadPoolExecutor(max_workers=max(args.workers, 1)) as pool:
        for stem, digest, rels, entries, err in pool.map(process, enumerate(manifest.entries)):
            if err:
                failures.append(err)
                continue
            index[stem] = {"hash": digest, "patches": rels}
            out_entries.extend(entries)
    index_path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    write_manifest(DatasetManifest(out_entries), args.out / "manifest.jsonl", header=head)
    for f in failures:
        log.error("standardize failed: %s", f)
    log.info("standardized %d samples -> %d patches", len(manifest.entries) - len(failures), len(out_entries))
    return 1 if failures else 0


def _group_scores(entries, scores, key_fn):
    groups: dict[str, list[float]] = {}
    for e, s in zip(entries, scores):
        groups.setdefault(key_fn(e), []).append(s)
    return groups


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args, "evaluate")
    resamples = int(cfg.get("resamples", 1000))
    level = float(cfg.get("level", 0.95))
    head = log_resolved_config(args.out, "evaluate", cfg)
    manifest = read_manifest(args.manifest)
    base = args.manifest.parent
    scores = []
    for entry in manifest.entries:
        pred_path = args.pred_dir / Path(entry.mask_path).name
        if not pred_path.exists():
            raise MissingPrediction(f"no prediction for {entry.mask_path}")
        pred = imgio.load_mask(pred_path)
        gt = imgio.load_mask(base / entry.mask_path)
        scores.append(metrics.dice(pred, gt))

    levels = {
        "overall": lambda e: "all",
        "dataset": lambda e: e.source or "unknown",
        "region": lambda e: e.label.region,
        "structure": lambda e: e.label.structure,
        "object_type": lambda e: e.label.object_type,
    }
    out_csv = args.out / "evaluation.csv"
    with open(out_csv, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# pathsegkit {__version__} config_hash={head['config_hash']}\n")
        writer = csv.writer(fh)
        writer.writerow(["level", "group", "n", "mean_dice", "ci_lo", "ci_hi"])
        for level_name, key_fn in levels.items():
            for group, vals in sorted(_group_scores(manifest.entries, scores, key_fn).items()):
                ci = metrics.bootstrap_ci(vals, resamples=resamples, level=level, seed=args.seed)
                writer.writerow([level_name, group, len(vals), f"{ci.mean:.6f}", f"{ci.lo:.6f}", f"{ci.hi:.6f}"])
    log.info("wrote %s (%d samples)", out_csv, len(scores))
    return 0


def cmd_boxes(args) -> int:
    cfg = load_run_config(args, "boxes")
    kind = cfg.get("kind", args.kind)
    min_size = int(cfg.get("min_size", metrics.MIN_INSTANCE_SIZE))
    head = log_resolved_config(args.out, "boxes", cfg | {"kind": kind})
    manifest = read_manifest(args.manifest)
    base = args.manifest.parent
    records = []
    for entry in manifest.entries:
        mask = imgio.load_mask(base / entry.mask_path)
        if kind == "union":
            bxs = [boxes_mod.union_box(mask)]
        else:
            bxs = boxes_mod.instance_boxes(mask, min_size=min_size)
        records.append(
            {
                "sample_id": Path(entry.mask_path).stem,
                "label": entry.label.render(),
                "kind": kind,
                "boxes": bxs,
            }
        )
    out_path = args.out / f"boxes_{kind}.jsonl"
    boxes_mod.write_boxes_jsonl(records, out_path, header=head)
    log.info("wrote %s (%d records)", out_path, len(records))
    return 0


def _load_samples(manifest: DatasetManifest, base: Path, split: str | None = None) -> list[SampleTriple]:
    samples = []
    for e in manifest.entries:
        if split and e.split != split:
            continue
        samples.append(
            SampleTriple(
                image=imgio.load_image(base / e.image_path),
                mask=imgio.load_mask(base / e.mask_path),
                label=e.label,
            )
        )
    return samples


def cmd_train(args) -> int:
    cfg = load_run_config(args, "train")
    eval_every = int(cfg.pop("eval_every", 0))
    target_dice = cfg.pop("target_dice", None)
    split = cfg.pop("split", "train")
    if args.epochs is not None:
        cfg["epochs"] = args.epochs
    model_cfg = ModelConfig(**{k: v for k, v in cfg.items() if k in ModelConfig().to_dict()})
    head = log_resolved_config(args.out, "train", model_cfg.to_dict())
    manifest = read_manifest(args.manifest)
    base = args.manifest.parent
    train_set = _load_samples(manifest, base, split=split or None)
    if not train_set:
        raise EmptyManifest(f"no '{split}' entries in {args.manifest}")
    vocab = Vocabulary.from_labels([e.label for e in manifest.entries])
    log.info("training on %d samples, vocab %d tokens", len(train_set), len(vocab))
    result = train_model(
        train_set, model_cfg, vocab=vocab, eval_every=eval_every,
        target_dice=target_dice, log=lambda rec: log.info("epoch %s", rec),
    )
    ckpt = args.out / "checkpoint.npz"
    save_checkpoint(ckpt, result.params, model_cfg, vocab)
    vocab.save(args.out / "vocab.txt")
    with open(args.out / "history.json", "w", encoding="utf-8") as fh:
        json.dump({"provenance": head, "history": result.history}, fh, indent=2)
        fh.write("\n")
    test_set = _load_samples(manifest, base, split="test")
    summary = {"final_loss": result.history[-1]["loss"], "epochs_run": len(result.history)}
    summary["train_dice"] = evaluate_dice(train_set, result.params, model_cfg, vocab)
    if test_set:
        summary["test_dice"] = evaluate_dice(test_set, result.params, model_cfg, vocab)
    with open(args.out / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    log.info("summary: %s", summary)
    return 0


def cmd_predict(args) -> int:
    cfg = load_run_config(args, "predict")
    head = log_resolved_config(args.out, "predict", cfg)
    params, model_cfg, vocab = load_checkpoint(args.checkpoint)
    image = imgio.load_image(args.image)
    mask = predict_mask(
        image, args.prompt, params, model_cfg, vocab,
        threshold=float(cfg.get("threshold", 0.5)),
    )
    out_path = args.out / f"{args.image.stem}_mask.png"
    imgio.save_mask(mask, out_path)
    log.info("wrote %s (%d foreground px) %s", out_path, int(mask.sum()), head["config_hash"])
    return 0


def _read_bags(bags_dir: Path) -> list[explain.SlideBag]:
    bags = []
    with open(bags_dir / "slides.jsonl", encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if "_provenance" in rec:
                continue
            patches = [imgio.load_image(bags_dir / p) for p in rec["patches"]]
            masks = {
                obj: [imgio.load_mask(bags_dir / p) for p in paths]
                for obj, paths in rec["object_masks"].items()
            }
            bags.append(
                explain.SlideBag(
                    slide_id=rec["slide_id"],
                    patches=patches,
                    label=int(rec["label"]),
                    grid_shape=tuple(rec["grid_shape"]),
                    object_masks=masks,
                )
            )
    if not bags:
        raise EmptyManifest(f"no slides in {bags_dir}")
    return bags


def _frozen_extractor(seed: int):
    """Frozen stub patch-feature extractor shared by the explain commands."""
    from .model import encode_image, init_params

    cfg = ModelConfig(d=16, n_queries=4, heads=2, patch=4, seed=seed)
    params = init_params(cfg, vocab_size=1, seed=seed)
    return lambda patch: encode_image(patch, params, cfg)[1]


def cmd_explain(args) -> int:
    cfg = load_run_config(args, "explain")
    mode = cfg.get("mode", args.mode)
    head = log_resolved_config(args.out, "explain", cfg | {"mode": mode})
    bags = _read_bags(args.bags)
    objects = sorted({obj for bag in bags for obj in bag.object_masks})
    extractor = explain.standardize_extractor(_frozen_extractor(args.seed), bags)
    mil_cfg = explain.MILTrainConfig(
        attn_hidden=int(cfg.get("attn_hidden", 32)),
        n_classes=max(b.label for b in bags) + 1,
        lr=float(cfg.get("lr", 1e-2)),
        epochs=int(cfg.get("epochs", 60)),
        seed=args.seed,
    )
    d = 16

    if mode == "importance":
        feature_bags = [(explain.extract_patch_features(b, extractor), b.label) for b in bags]
        params = explain.train_standard_model(feature_bags, d, mil_cfg)
        per_slide: dict[str, dict[str, float]] = {}
        rows = []
        by_obj_class: dict[tuple[str, int], list[float]] = {}
        for bag in bags:
            imps = explain.feature_importance(
                params, bag, objects, extractor,
                kernel_radius=int(cfg.get("kernel_radius", 15)),
            )
            per_slide[bag.slide_id] = {o: r.imp for o, r in imps.items()}
            for o, r in imps.items():
                by_obj_class.setdefault((o, bag.label), []).append(r.imp)
        for (obj, cls), vals in sorted(by_obj_class.items()):
            rows.append(
                {"object_label": obj, "class": cls,
                 "mean_imp": f"{np.mean(vals):.6f}", "n_slides": len(vals)}
            )
        explain.write_importance_report(
            rows, args.out / "importance.csv",
            header=f"pathsegkit {__version__} config_hash={head['config_hash']}",
        )
        with open(args.out / "importance_per_slide.json", "w", encoding="utf-8") as fh:
            json.dump(per_slide, fh, indent=2, sort_keys=True)
            fh.write("\n")
        log.info("wrote importance for %d slides x %d objects", len(bags), len(objects))
        return 0

    # mode == "cam": object-aware model, per-slide object CAMs + patch CAMs
    include_other = bool(cfg.get("include_other", True))
    object_bags = [
        (explain.extract_object_features(b, objects, extractor, include_other), b.label)
        for b in bags
    ]
    model_objects = objects + [explain.OTHER_OBJECT] if include_other else objects
    obj_params = explain.build_object_model(object_bags, model_objects, d, mil_cfg)
    feature_bags = [(explain.extract_patch_features(b, extractor), b.label) for b in bags]
    std_params = explain.train_standard_model(feature_bags, d, mil_cfg)
    for bag, (feats, _), (obj_feats, _) in zip(bags, feature_bags, object_bags):
        probs, slide_feats, _ = explain.object_model_forward(obj_feats, obj_params)
        c = int(np.argmax(probs))
        acts = explain.object_cam(slide_feats, obj_params.cls_w, c)
        slide_masks = {o: explain.stitch_object_masks(bag, o) for o in objects}
        if include_other:
            union = np.zeros_like(next(iter(slide_masks.values())))
            for m in slide_masks.values():
                union |= m
            slide_masks[explain.OTHER_OBJECT] = 1 - union
        cam_map = explain.paint_object_map(acts, slide_masks)
        canvas = explain.stitch_patches(bag)
        imgio.save_image(explain.cam_overlay(canvas, cam_map), args.out / f"{bag.slide_id}_object_cam.png")
        explain.write_activation_json(acts, args.out / f"{bag.slide_id}_activations.json")
        # standard-model patch CAM alongside
        slide_vec, alpha = explain.mil_aggregate(feats, std_params)
        c_std = int(np.argmax(explain.classify(slide_vec, std_params.cls_w)))
        patch_acts = explain.patch_cam(feats, alpha, std_params.cls_w, c_std)
        patch_map = explain.paint_patch_map(patch_acts, bag.grid_shape, bag.patches[0].shape[0])
        imgio.save_image(explain.cam_overlay(canvas, patch_map), args.out / f"{bag.slide_id}_patch_cam.png")
    log.info("wrote CAMs for %d slides", len(bags))
    return 0


def cmd_gen_synthetic(args) -> int:
    cfg = load_run_config(args, "gen-synthetic")
    kind = cfg.get("kind", args.kind)
    head = log_resolved_config(args.out, "gen-synthetic", cfg | {"kind": kind})
    if kind == "segmentation":
        manifest_path = synthetic.write_corpus(
            args.out,
            n=int(cfg.get("n", args.n)),
            size=int(cfg.get("size", args.size)),
            seed=args.seed,
            split_ratio=float(cfg.get("split_ratio", 0.8)),
            header=head,
        )
        log.info("wrote %s", manifest_path)
        return 0
    bags = synthetic.make_bags(
        n_slides=int(cfg.get("n_slides", 24)),
        patches_per_slide=int(cfg.get("patches_per_slide", 9)),
        patch_size=int(cfg.get("patch_size", 32)),
        seed=args.seed,
    )
    (args.out / "patches").mkdir(parents=True, exist_ok=True)
    with open(args.out / "slides.jsonl", "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"_provenance": head}) + "\n")
        for bag in bags:
            patch_rels, mask_rels = [], {obj: [] for obj in bag.object_masks}
            for i, patch in enumerate(bag.patches):
                rel = f"patches/{bag.slide_id}_{i:03d}.png"
                imgio.save_image(patch, args.out / rel)
                patch_rels.append(rel)
                for obj, masks in bag.object_masks.items():
                    mrel = f"patches/{bag.slide_id}_{i:03d}_{obj.replace(' ', '_')}.png"
                    imgio.save_mask(masks[i], args.out / mrel)
                    mask_rels[obj].append(mrel)
            fh.write(
                json.dumps(
                    {
                        "slide_id": bag.slide_id,
                        "label": bag.label,
                        "grid_shape": list(bag.grid_shape),
                        "patches": patch_rels,
                        "object_masks": mask_rels,
                    }
                )
                + "\n"
            )
    log.info("wrote %d slide bags", len(bags))
    return 0


def cmd_report(args) -> int:
    cfg = load_run_config(args, "report")
    head = log_resolved_config(args.out, "report", cfg)
    manifest = read_manifest(args.manifest)
    base = args.manifest.parent
    min_size = int(cfg.get("min_size", metrics.MIN_INSTANCE_SIZE))
    rows, trend_samples = [], []
    for entry in manifest.entries:
        gt = imgio.load_mask(base / entry.mask_path)
        sample_id = Path(entry.mask_path).stem
        row = {"sample_id": sample_id, "label": entry.label.render()}
        if gt.any():
            row["irregularity"] = f"{metrics.irregularity(gt):.6f}"
            try:
                row["instance_ratio"] = f"{metrics.instance_ratio(gt, min_size):.6f}"
            except PathsegkitError:
                row["instance_ratio"] = ""
            row["instance_count"] = metrics.instance_count(gt, min_size)
            disp = metrics.instance_dispersion(gt, min_size)
            row["instance_dispersion"] = f"{disp.value:.6f}" if disp.defined else ""
        if args.pred_dir is not None:
            pred_path = args.pred_dir / Path(entry.mask_path).name
            if not pred_path.exists():
                raise MissingPrediction(f"no prediction for {entry.mask_path}")
            score = metrics.dice(imgio.load_mask(pred_path), gt)
            row["dice"] = f"{score:.6f}"
            if gt.any():
                trend_samples.append((metrics.irregularity(gt), score))
        rows.append(row)
    header = f"pathsegkit {__version__} config_hash={head['config_hash']}"
    metrics.write_metric_report(rows, args.out / "metrics.csv", header=header)
    if trend_samples:
        edges = cfg.get("edges", [round(0.05 * i, 2) for i in range(21)])
        bins = metrics.binned_trend(trend_samples, edges)
        metrics.write_trend_table(bins, args.out / "irregularity_trend.csv", header=header)
    log.info("wrote metric report for %d samples", len(rows))
    return 0


if __name__ == "__main__":
    sys.exit(main())
