"""Attack detection: suspicious-box extraction, feature transplantation, AND-vote.

A test input is flagged as adversarial iff its most-influential box, copied
into the least-influential region of each of k defender-private hold-out
images, drives every one of them to the test input's own predicted label.
Benign salient features rarely survive that transfer; a universal patch does.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .images import check_image
from .model_zoo import Classifier, predict
from .saliency import (Box, SaliencyMap, SmoothGradConfig, average_filter,
                       default_box_side, default_filter_side, locate_max_box,
                       locate_min_box, smoothgrad)
from .seeding import TAG_HOLDOUT_ENTRY, derive_seed


@dataclass(frozen=True)
class DetectionConfig:
    k: int = 2
    box_height: int = 0
    box_width: int = 0
    smoothgrad: SmoothGradConfig = field(default_factory=SmoothGradConfig)
    filter_side: int = 0

    @staticmethod
    def for_side(image_side: int, k: int = 2,
                 smoothgrad_config: SmoothGradConfig | None = None) -> "DetectionConfig":
        """Defaults scaled from the reference geometry: filter 0.23 x side
        (nearest odd), box 0.455 x side (rounded)."""
        box = default_box_side(image_side)
        return DetectionConfig(
            k=k, box_height=box, box_width=box,
            smoothgrad=smoothgrad_config or SmoothGradConfig(),
            filter_side=default_filter_side(image_side))

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class HoldoutEntry:
    image: np.ndarray
    predicted_label: int
    min_box: Box


@dataclass
class HoldoutSet:
    entries: list[HoldoutEntry]
    seed: int
    config: DetectionConfig

    def __len__(self) -> int:
        return len(self.entries)


@dataclass
class DetectionOutcome:
    flagged: bool
    suspicious_box: Box
    original_label: int
    transplant_labels: list[int]

    def __post_init__(self):
        if self.flagged != all(l == self.original_label for l in self.transplant_labels):
            raise ValueError("flagged must equal the AND-vote over transplant labels")


def sample_without_replacement(rng: np.random.Generator, pool_size: int,
                               count: int) -> np.ndarray:
    """Partial Fisher-Yates: for i in range(count), swap i with rng.integers(i, n).

    Pinned as the hold-out sampling algorithm so reference implementations can
    reproduce it draw for draw.
    """
    idx = np.arange(pool_size)
    for i in range(count):
        j = int(rng.integers(i, pool_size))
        idx[i], idx[j] = idx[j], idx[i]
    return idx[:count].copy()


def build_holdout(pool_images: np.ndarray, holdout_size: int,
                  classifier: Classifier, config: DetectionConfig,
                  seed: int) -> HoldoutSet:
    """Sample hold-out images and precompute each one's least-salient box.

    The per-entry saliency map is taken w.r.t. the entry's own predicted label,
    average-filtered, then the min box located — all offline, so detection
    later costs only k forward passes plus one saliency map.
    """
    pool = np.asarray(pool_images, dtype=np.float32)
    if pool.ndim == 3:
        pool = pool[None]
    if pool.shape[0] < holdout_size:
        raise ValueError(
            f"pool of {pool.shape[0]} images cannot provide {holdout_size}")
    rng = np.random.default_rng(seed)
    chosen = sample_without_replacement(rng, pool.shape[0], holdout_size)
    entries = []
    for position, idx in enumerate(chosen):
        image = pool[idx]
        label = predict(classifier, image).label
        sg_seed = derive_seed(config.smoothgrad.seed, TAG_HOLDOUT_ENTRY, position)
        sg = replace(config.smoothgrad, seed=sg_seed)
        smap = smoothgrad(classifier, image, label, sg)
        filtered = average_filter(smap, config.filter_side)
        min_box = locate_min_box(filtered, config.box_height, config.box_width)
        entries.append(HoldoutEntry(image, label, min_box))
    return HoldoutSet(entries, seed, config)


def transplant(src: np.ndarray, src_box: Box, dst: np.ndarray,
               dst_box: Box) -> np.ndarray:
    """Copy the src_box region of src over the dst_box region of dst.

    Boxes must have identical dimensions; every pixel outside dst_box is
    bit-identical to dst.
    """
    if (src_box.height, src_box.width) != (dst_box.height, dst_box.width):
        raise ValueError("source and destination boxes must have identical dims")
    src = check_image(src)
    out = check_image(dst).copy()
    out[dst_box.slices] = src[src_box.slices]
    return out


def detect(classifier: Classifier, image: np.ndarray, holdout: HoldoutSet,
           config: DetectionConfig, rng: np.random.Generator) -> DetectionOutcome:
    """Flag `image` iff all k transplanted hold-out images share its label.

    Stream draw order: one 31-bit saliency seed, then a permutation of the
    hold-out set whose first k entries are used — so outcomes for smaller k are
    prefixes of outcomes for larger k (see restrict_outcome).
    """
    if len(holdout) == 0:
        raise ValueError("hold-out set is empty")
    if config.k > len(holdout):
        raise ValueError("k exceeds the hold-out size")
    img = check_image(image)
    label = predict(classifier, img).label
    sg = replace(config.smoothgrad, seed=int(rng.integers(2 ** 31)))
    smap = smoothgrad(classifier, img, label, sg)
    filtered = average_filter(smap, config.filter_side)
    suspicious = locate_max_box(filtered, config.box_height, config.box_width)

    order = rng.permutation(len(holdout))
    labels = []
    for idx in order[: config.k]:
        entry = holdout.entries[int(idx)]
        implanted = transplant(img, suspicious, entry.image, entry.min_box)
        labels.append(predict(classifier, implanted).label)
    flagged = all(l == label for l in labels)
    return DetectionOutcome(flagged, suspicious, label, labels)


def restrict_outcome(outcome: DetectionOutcome, k: int) -> DetectionOutcome:
    """The outcome detect() would return with a smaller k on the same stream."""
    if not 1 <= k <= len(outcome.transplant_labels):
        raise ValueError("k out of range for this outcome")
    labels = outcome.transplant_labels[:k]
    return DetectionOutcome(all(l == outcome.original_label for l in labels),
                            outcome.suspicious_box, outcome.original_label, labels)


# ---------------------------------------------------------------------------
# Hold-out IO: npz payload with a JSON manifest entry
# ---------------------------------------------------------------------------

def save_holdout(holdout: HoldoutSet, path: str) -> None:
    manifest = json.dumps({
        "format_version": 1,
        "seed": holdout.seed,
        "size": len(holdout),
        "config": {
            "k": holdout.config.k,
            "box_height": holdout.config.box_height,
            "box_width": holdout.config.box_width,
            "filter_side": holdout.config.filter_side,
            "smoothgrad": {"n": holdout.config.smoothgrad.n,
                           "sigma": holdout.config.smoothgrad.sigma,
                           "seed": holdout.config.smoothgrad.seed},
        },
    }, sort_keys=True)
    images = np.stack([e.image for e in holdout.entries])
    labels = np.array([e.predicted_label for e in holdout.entries], dtype=np.int64)
    boxes = np.array([[e.min_box.top, e.min_box.left, e.min_box.height,
                       e.min_box.width] for e in holdout.entries], dtype=np.int64)
    with open(path, "wb") as f:
        np.savez(f, manifest=np.frombuffer(manifest.encode("utf-8"), dtype=np.uint8),
                 images=images, labels=labels, boxes=boxes)


def load_holdout(path: str) -> HoldoutSet:
    with np.load(io.BytesIO(open(path, "rb").read())) as z:
        manifest = json.loads(bytes(z["manifest"]).decode("utf-8"))
        images, labels, boxes = z["images"], z["labels"], z["boxes"]
    cfg = manifest["config"]
    config = DetectionConfig(
        k=cfg["k"], box_height=cfg["box_height"], box_width=cfg["box_width"],
        smoothgrad=SmoothGradConfig(**cfg["smoothgrad"]),
        filter_side=cfg["filter_side"])
    entries = [HoldoutEntry(images[i], int(labels[i]),
                            Box(*[int(v) for v in boxes[i]]))
               for i in range(images.shape[0])]
    return HoldoutSet(entries, manifest["seed"], config)
