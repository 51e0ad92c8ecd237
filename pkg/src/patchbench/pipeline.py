"""End-to-end orchestration: detect per input, mitigate when flagged, emit a Verdict.

Per-image randomness is keyed by (master seed, content-derived image id) with
separate substreams for detection draws and mask layout, so batch order never
changes a verdict, detection does not depend on the masking percentage, and
masks do not depend on k.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .detector import DetectionConfig, DetectionOutcome, HoldoutSet, detect
from .images import check_image, image_id
from .mitigator import InpaintBackend, MaskSpec, MitigationResult, mitigate
from .model_zoo import Classifier
from .saliency import Box
from .seeding import TAG_DETECT, TAG_MASK, derive_rng, derive_seed

logger = logging.getLogger(__name__)

STAGES = ("benign-by-detection", "mitigated", "rectified")


@dataclass(frozen=True)
class PipelineConfig:
    detection: DetectionConfig
    mask: MaskSpec
    backend: InpaintBackend = field(default_factory=InpaintBackend)
    master_seed: int = 0


@dataclass
class Verdict:
    final_label: int
    is_adversarial: bool
    stage: str
    detection: DetectionOutcome
    mitigation: MitigationResult | None
    image_id: str = ""

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.stage == "benign-by-detection":
            if self.is_adversarial or self.mitigation is not None:
                raise ValueError("benign-by-detection verdicts carry no mitigation")
        elif self.is_adversarial != (self.stage == "mitigated"):
            raise ValueError("stage must mirror is_adversarial")


def detect_stage(classifier: Classifier, image: np.ndarray, holdout: HoldoutSet,
                 detection: DetectionConfig, master_seed: int) -> DetectionOutcome:
    """Detection with the per-image stream the pipeline would use."""
    rng = derive_rng(master_seed, image_id(image), TAG_DETECT)
    return detect(classifier, image, holdout, detection, rng)


def mitigate_stage(classifier: Classifier, image: np.ndarray, box: Box,
                   mask: MaskSpec, backend: InpaintBackend,
                   master_seed: int) -> MitigationResult:
    """Mitigation with the per-image mask seed the pipeline would use."""
    seed = derive_seed(master_seed, image_id(image), TAG_MASK)
    return mitigate(classifier, image, box, MaskSpec(mask.p, seed), backend)


def process(classifier: Classifier, image: np.ndarray, holdout: HoldoutSet,
            config: PipelineConfig) -> Verdict:
    """Detect; if flagged, mitigate; map to a single Verdict.

    Unflagged inputs keep the classifier's raw prediction (benign-by-detection).
    Flagged inputs resolve through mitigation to either `mitigated`
    (is_adversarial, inpainted label final) or `rectified` (false positive
    withdrawn, original label final).
    """
    img = check_image(image)
    iid = image_id(img)
    outcome = detect_stage(classifier, img, holdout, config.detection,
                           config.master_seed)
    if not outcome.flagged:
        return Verdict(outcome.original_label, False, "benign-by-detection",
                       outcome, None, f"{iid:016x}")
    result = mitigate_stage(classifier, img, outcome.suspicious_box, config.mask,
                            config.backend, config.master_seed)
    stage = "mitigated" if result.is_adversarial else "rectified"
    return Verdict(result.final_label, result.is_adversarial, stage, outcome,
                   result, f"{iid:016x}")


def process_batch(classifier: Classifier, images: np.ndarray, holdout: HoldoutSet,
                  config: PipelineConfig) -> list[Verdict | None]:
    """Elementwise process; per-image failures are logged as None entries and
    the batch continues. Results are order-independent (streams keyed by id)."""
    imgs = np.asarray(images, dtype=np.float32)
    if imgs.ndim == 3:
        imgs = imgs[None]
    if imgs.shape[0] == 0:
        raise ValueError("images is empty")
    verdicts: list[Verdict | None] = []
    for i in range(imgs.shape[0]):
        try:
            verdicts.append(process(classifier, imgs[i], holdout, config))
        except Exception:  # noqa: BLE001 - contract: record and continue
            logger.exception("pipeline failed on image %d", i)
            verdicts.append(None)
    return verdicts


def verdict_to_dict(verdict: Verdict) -> dict:
    """JSON-ready dict with deterministic content (ints, bools, strings only)."""
    det = verdict.detection
    out = {
        "image_id": verdict.image_id,
        "final_label": int(verdict.final_label),
        "is_adversarial": bool(verdict.is_adversarial),
        "stage": verdict.stage,
        "detection": {
            "flagged": bool(det.flagged),
            "suspicious_box": [det.suspicious_box.top, det.suspicious_box.left,
                               det.suspicious_box.height, det.suspicious_box.width],
            "original_label": int(det.original_label),
            "transplant_labels": [int(l) for l in det.transplant_labels],
        },
        "mitigation": None,
    }
    if verdict.mitigation is not None:
        mit = verdict.mitigation
        out["mitigation"] = {
            "final_label": int(mit.final_label),
            "is_adversarial": bool(mit.is_adversarial),
            "labels": {"original": int(mit.labels["original"]),
                       "inpainted": int(mit.labels["inpainted"])},
        }
    return out
