"""Command-line entry points.

make-data    generate the procedural pattern dataset
train-model  train the desk-scale classifier
forge-patch  synthesise standard / adaptive adversarial patches
saliency     emit a saliency map (portable grid + optional heatmap PNG)
detect       run detection on one image
mitigate     run masking + inpainting on one image
run          full pipeline over a directory of images -> verdicts.jsonl
evaluate     grid experiment -> metrics.csv, verdicts.jsonl, plots, manifest
"""
from __future__ import annotations

import argparse
import json
import os
from dataclasses import replace

import numpy as np

from . import harness, model_zoo
from .detector import (DetectionConfig, build_holdout, detect, load_holdout,
                       save_holdout)
from .harness_config import ExperimentConfig
from .images import image_id, load_png, save_png
from .mitigator import InpaintBackend, MaskSpec, mitigate
from .model_zoo import (TrainConfig, load_checkpoint, load_dataset,
                        make_shapes_dataset, save_checkpoint, save_dataset,
                        train_classifier)
from .patch_forge import (AdaptiveSaliencyConfig, EotConfig, PatchSpec,
                          PatchTrainConfig, attack_success_rate, load_patch,
                          save_patch, train_patch, train_patch_adaptive_masking,
                          train_patch_adaptive_saliency)
from .pipeline import PipelineConfig, process_batch, verdict_to_dict
from .saliency import Box, SmoothGradConfig, average_filter, smoothgrad
from .seeding import TAG_DETECT, derive_rng

BETA_GRID = (0.1, 0.5, 1.0, 5.0)


def make_data_main(argv=None):
    ap = argparse.ArgumentParser(description="Generate the procedural 10-class pattern dataset")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--train", type=int, default=3000)
    ap.add_argument("--test", type=int, default=1500)
    ap.add_argument("--side", type=int, default=64)
    ap.add_argument("--classes", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    train = make_shapes_dataset(args.train, args.side, args.classes, seed=args.seed)
    test = make_shapes_dataset(args.test, args.side, args.classes, seed=args.seed + 1)
    save_dataset(train, os.path.join(args.out, "train.npz"))
    save_dataset(test, os.path.join(args.out, "test.npz"))
    print(f"wrote {args.train} train / {args.test} test images to {args.out}")


def train_model_main(argv=None):
    ap = argparse.ArgumentParser(description="Train the desk-scale classifier")
    ap.add_argument("--data", required=True, help="dataset dir (train.npz) or npz file")
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--arch", default="convnet4-w16")
    ap.add_argument("--out", required=True, help="checkpoint path")
    args = ap.parse_args(argv)
    path = args.data
    if os.path.isdir(path):
        path = os.path.join(path, "train.npz")
    dataset = load_dataset(path)
    clf = train_classifier(dataset, TrainConfig(
        epochs=args.epochs, learning_rate=args.lr, seed=args.seed,
        architecture=args.arch))
    save_checkpoint(clf, args.out)
    print(f"clean hold-out accuracy: {clf.metadata['clean_accuracy']:.4f}")
    print(f"checkpoint written to {args.out}")


def _parse_eot(args) -> EotConfig:
    return EotConfig(rotation=(-args.rotation, args.rotation),
                     scale=(args.scale_min, args.scale_max),
                     brightness=(-args.brightness, args.brightness))


def forge_patch_main(argv=None):
    ap = argparse.ArgumentParser(description="Synthesise a universal adversarial patch")
    ap.add_argument("--model", required=True)
    ap.add_argument("--data", required=True, help="training images (npz dataset)")
    ap.add_argument("--size", type=float, default=0.07, help="area fraction")
    ap.add_argument("--shape", choices=["square", "rectangle", "circle"],
                    default="square")
    ap.add_argument("--target", type=int, required=True)
    ap.add_argument("--mode", choices=["standard", "adaptive-saliency",
                                       "adaptive-masking"], default="standard")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--steps", type=int, default=30)
    ap.add_argument("--lr", type=float, default=4.0)
    ap.add_argument("--train-images", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--rotation", type=float, default=20.0)
    ap.add_argument("--scale-min", type=float, default=0.8)
    ap.add_argument("--scale-max", type=float, default=1.2)
    ap.add_argument("--brightness", type=float, default=0.1)
    ap.add_argument("--beta", type=float, default=None,
                    help="adaptive-saliency weight; omit to sweep the grid")
    ap.add_argument("--mask-fraction", type=float, default=0.75,
                    help="adaptive-masking drop fraction")
    ap.add_argument("--out", required=True, help="patch PNG path")
    args = ap.parse_args(argv)

    clf = load_checkpoint(args.model)
    data = load_dataset(args.data)
    train_images = data.images[: args.train_images]
    spec = PatchSpec(args.shape, args.size, args.target)
    eot = _parse_eot(args)
    opt = PatchTrainConfig(epochs=args.epochs, steps=args.steps,
                           learning_rate=args.lr, seed=args.seed)

    if args.mode == "standard":
        patch = train_patch(clf, train_images, spec, eot, opt)
    elif args.mode == "adaptive-masking":
        patch = train_patch_adaptive_masking(clf, train_images, spec, eot, opt,
                                             args.mask_fraction)
    else:
        betas = [args.beta] if args.beta is not None else list(BETA_GRID)
        best = None
        for beta in betas:
            cand = train_patch_adaptive_saliency(
                clf, train_images, spec, eot, opt, AdaptiveSaliencyConfig(beta=beta))
            print(f"beta={beta:g}: held-out asr {cand.metadata['final_asr']:.3f}")
            if best is None or cand.metadata["final_asr"] > best.metadata["final_asr"]:
                best = cand
        best.metadata["beta_grid"] = betas
        patch = best

    test_images = data.images[args.train_images: args.train_images + 500]
    if test_images.shape[0]:
        asr = attack_success_rate(clf, patch, test_images, eot, seed=args.seed + 1)
        patch.metadata["test_asr"] = float(asr)
        print(f"test-set attack success rate: {asr:.3f}")
    save_patch(patch, args.out)
    print(f"patch written to {args.out} (+ .json sidecar)")


def saliency_main(argv=None):
    ap = argparse.ArgumentParser(description="Compute a saliency map for one image")
    ap.add_argument("--model", required=True)
    ap.add_argument("--image", required=True)
    ap.add_argument("--n", type=int, default=50)
    ap.add_argument("--sigma", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--class-index", type=int, default=None,
                    help="defaults to the predicted class")
    ap.add_argument("--filter-side", type=int, default=0,
                    help="odd window for average filtering; 0 = raw map")
    ap.add_argument("--out", required=True, help="output .npz grid")
    ap.add_argument("--heatmap", default=None, help="optional heatmap PNG")
    args = ap.parse_args(argv)

    clf = load_checkpoint(args.model)
    image = load_png(args.image)
    label = args.class_index
    if label is None:
        label = model_zoo.predict(clf, image).label
    smap = smoothgrad(clf, image, label, SmoothGradConfig(args.n, args.sigma, args.seed))
    if args.filter_side:
        smap = average_filter(smap, args.filter_side)
    header = json.dumps({"source_class": int(smap.source_class),
                         "n": args.n, "sigma": args.sigma, "seed": args.seed,
                         "filter_side": args.filter_side}, sort_keys=True)
    with open(args.out, "wb") as f:
        np.savez(f, values=smap.values,
                 header=np.frombuffer(header.encode("utf-8"), dtype=np.uint8))
    if args.heatmap:
        lo, hi = smap.values.min(), smap.values.max()
        norm = (smap.values - lo) / (hi - lo) if hi > lo else smap.values * 0.0
        save_png(np.repeat(norm[..., None], 3, axis=2).astype(np.float32),
                 args.heatmap)
    print(f"saliency map for class {label} written to {args.out}")


def detect_main(argv=None):
    ap = argparse.ArgumentParser(description="Run attack detection on one image")
    ap.add_argument("--model", required=True)
    ap.add_argument("--holdout", required=True)
    ap.add_argument("--image", required=True)
    ap.add_argument("--k", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    clf = load_checkpoint(args.model)
    holdout = load_holdout(args.holdout)
    image = load_png(args.image)
    config = replace(holdout.config, k=args.k)
    rng = derive_rng(args.seed, image_id(image), TAG_DETECT)
    outcome = detect(clf, image, holdout, config, rng)
    box = outcome.suspicious_box
    print(json.dumps({
        "flagged": outcome.flagged,
        "suspicious_box": [box.top, box.left, box.height, box.width],
        "original_label": outcome.original_label,
        "transplant_labels": outcome.transplant_labels,
    }, sort_keys=True))


def mitigate_main(argv=None):
    ap = argparse.ArgumentParser(description="Run masking + inpainting on one image")
    ap.add_argument("--model", required=True)
    ap.add_argument("--image", required=True)
    ap.add_argument("--box", required=True, help="top,left,height,width")
    ap.add_argument("--p", type=float, default=100.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--backend", choices=["diffusion-baseline", "neural-plugin"],
                    default="diffusion-baseline")
    ap.add_argument("--out", default=None, help="inpainted PNG path")
    args = ap.parse_args(argv)

    clf = load_checkpoint(args.model)
    image = load_png(args.image)
    parts = [int(v) for v in args.box.split(",")]
    if len(parts) != 4:
        ap.error("--box must be top,left,height,width")
    result = mitigate(clf, image, Box(*parts), MaskSpec(args.p, args.seed),
                      InpaintBackend(args.backend))
    if args.out:
        save_png(result.inpainted_image, args.out)
    print(json.dumps({
        "final_label": result.final_label,
        "is_adversarial": result.is_adversarial,
        "labels": result.labels,
    }, sort_keys=True))


def run_main(argv=None):
    ap = argparse.ArgumentParser(description="Full pipeline over a directory of PNGs")
    ap.add_argument("--model", required=True)
    ap.add_argument("--holdout", required=True)
    ap.add_argument("--input", required=True, help="directory of PNG images")
    ap.add_argument("--p", type=float, default=100.0)
    ap.add_argument("--k", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", required=True, help="verdicts.jsonl path")
    args = ap.parse_args(argv)

    clf = load_checkpoint(args.model)
    holdout = load_holdout(args.holdout)
    config = PipelineConfig(detection=replace(holdout.config, k=args.k),
                            mask=MaskSpec(args.p), master_seed=args.seed)
    names = sorted(n for n in os.listdir(args.input) if n.lower().endswith(".png"))
    if not names:
        ap.error(f"no PNG images under {args.input}")
    images = np.stack([load_png(os.path.join(args.input, n)) for n in names])
    verdicts = process_batch(clf, images, holdout, config)
    with open(args.out, "w", encoding="utf-8") as f:
        for name, verdict in zip(names, verdicts):
            if verdict is None:
                row = {"file": name, "error": "pipeline failure"}
            else:
                row = {"file": name}
                row.update(verdict_to_dict(verdict))
            f.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
    flagged = sum(1 for v in verdicts if v is not None and v.is_adversarial)
    print(f"{len(names)} images, {flagged} adversarial; verdicts in {args.out}")


def evaluate_main(argv=None):
    ap = argparse.ArgumentParser(description="Grid experiment driver")
    ap.add_argument("--config", required=True, help="experiment config JSON")
    ap.add_argument("--out", required=True, help="results directory")
    args = ap.parse_args(argv)
    config = ExperimentConfig.from_json(args.config)
    result = harness.run_experiment(config, args.out)
    for cell in result["reports"]:
        r = cell.report
        print(f"{cell.patch_name} p={cell.p:g} k={cell.k}: "
              f"recall={r.detection_success_recall:.3f} "
              f"fpr={r.detection_fpr:.3f} robust_acc={r.robust_accuracy:.3f} "
              f"mit_fpr={r.mitigation_fpr:.3f}")
    print(f"artifacts in {args.out}")


def build_holdout_main(argv=None):
    ap = argparse.ArgumentParser(description="Build and save a hold-out set")
    ap.add_argument("--model", required=True)
    ap.add_argument("--data", required=True, help="pool dataset npz")
    ap.add_argument("--size", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n", type=int, default=50, help="saliency sample count")
    ap.add_argument("--sigma", type=float, default=0.1)
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)
    clf = load_checkpoint(args.model)
    data = load_dataset(args.data)
    config = DetectionConfig.for_side(
        clf.input_side, smoothgrad_config=SmoothGradConfig(args.n, args.sigma, args.seed))
    holdout = build_holdout(data.images, args.size, clf, config, args.seed)
    save_holdout(holdout, args.out)
    print(f"hold-out of {args.size} entries written to {args.out}")
