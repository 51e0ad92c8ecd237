"""Attack mitigation: parametric random masking, inpainting, FP rectification.

Flagged inputs have p% of the suspicious box masked and re-synthesised from the
surrounding context. If the label changes, the input was adversarial and the
inpainted label is the answer; if it survives, the flag was a false positive
and the original label stands.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .images import check_image
from .model_zoo import Classifier, predict
from .saliency import Box

MASK_SENTINEL = 0.5  # mid-gray written into masked pixels before inpainting


class InpaintBackendUnavailable(RuntimeError):
    """The requested inpainting backend cannot run; never silently passed through."""


@dataclass(frozen=True)
class MaskSpec:
    p: float          # percentage of box pixels to mask, in [0, 100]
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 100.0:
            raise ValueError("p must lie in [0, 100]")


@dataclass
class InpaintBackend:
    backend_id: str = "diffusion-baseline"
    params: dict = field(default_factory=dict)
    plugin: object = None  # callable(masked_image, mask) -> image, for neural-plugin

    def __post_init__(self):
        if self.backend_id not in ("diffusion-baseline", "neural-plugin"):
            raise ValueError(f"unknown backend {self.backend_id!r}")


@dataclass
class MitigationResult:
    final_label: int
    is_adversarial: bool
    masked_image: np.ndarray
    inpainted_image: np.ndarray
    labels: dict  # {"original": ..., "inpainted": ...}

    def __post_init__(self):
        if self.is_adversarial != (self.labels["original"] != self.labels["inpainted"]):
            raise ValueError("is_adversarial must mirror the label comparison")


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def random_mask(image: np.ndarray, box: Box, spec: MaskSpec
                ) -> tuple[np.ndarray, np.ndarray]:
    """Mask exactly round(p% * box area) pixels inside the box, without replacement.

    The masked set is the first count entries of a seeded permutation of the
    box's pixels, so masks for increasing p (same seed) are nested. Masked
    pixels are set to the mid-gray sentinel; everything else is untouched.
    """
    img = check_image(image)
    h, w = img.shape[:2]
    if box.top + box.height > h or box.left + box.width > w:
        raise ValueError("box exceeds image bounds")
    count = _round_half_up(spec.p / 100.0 * box.area)
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(box.area)[:count]
    rows = box.top + perm // box.width
    cols = box.left + perm % box.width
    mask = np.zeros((h, w), dtype=np.uint8)
    mask[rows, cols] = 1
    masked = img.copy()
    masked[rows, cols] = MASK_SENTINEL
    return masked, mask


def _harmonic_fill(image: np.ndarray, mask: np.ndarray, tol: float = 1e-5,
                   max_iters: int = 20000) -> np.ndarray:
    """Jacobi iteration of the 4-neighbour Laplace fill on the mask's bounding box."""
    out = image.astype(np.float64, copy=True)
    ys, xs = np.nonzero(mask)
    top = max(0, ys.min() - 1)
    bottom = min(image.shape[0], ys.max() + 2)
    left = max(0, xs.min() - 1)
    right = min(image.shape[1], xs.max() + 2)
    crop = out[top:bottom, left:right]
    mcrop = mask[top:bottom, left:right].astype(bool)
    context = crop[~mcrop]
    crop[mcrop] = context.mean(axis=0) if context.size else MASK_SENTINEL
    for _ in range(max_iters):
        padded = np.pad(crop, ((1, 1), (1, 1), (0, 0)), mode="edge")
        avg = 0.25 * (padded[:-2, 1:-1] + padded[2:, 1:-1]
                      + padded[1:-1, :-2] + padded[1:-1, 2:])
        delta = np.abs(avg[mcrop] - crop[mcrop]).max() if mcrop.any() else 0.0
        crop[mcrop] = avg[mcrop]
        if delta < tol:
            break
    out[top:bottom, left:right] = crop
    return out


def inpaint(backend: InpaintBackend, masked_image: np.ndarray,
            mask: np.ndarray) -> np.ndarray:
    """Synthesise masked pixels from surrounding context; unmasked pixels are
    bit-identical to the input and the output stays in [0, 1]."""
    img = check_image(masked_image)
    m = np.asarray(mask)
    if m.shape != img.shape[:2]:
        raise ValueError("mask must be H x W matching the image")
    if not m.any():
        return img.copy()
    if backend.backend_id == "diffusion-baseline":
        filled = _harmonic_fill(img, m,
                                tol=backend.params.get("tol", 1e-5),
                                max_iters=backend.params.get("max_iters", 20000))
    else:
        if not callable(backend.plugin):
            raise InpaintBackendUnavailable(
                "neural-plugin backend requires a pretrained inpainting callable; "
                "none was provided")
        filled = np.asarray(backend.plugin(img.copy(), m.copy()), dtype=np.float64)
        if filled.shape != img.shape:
            raise InpaintBackendUnavailable(
                f"plugin returned shape {filled.shape}, expected {img.shape}")
    out = np.clip(filled, 0.0, 1.0).astype(np.float32)
    keep = m == 0
    out[keep] = img[keep]
    return out


def mitigate(classifier: Classifier, image: np.ndarray, box: Box,
             spec: MaskSpec, backend: InpaintBackend) -> MitigationResult:
    """Mask p% of the box, inpaint, and compare labels.

    Labels differ -> the attack is confirmed and the inpainted label is final.
    Labels agree -> the detection flag is rectified as a false positive and the
    original label stands. Backend failures propagate; no fallback label.
    """
    img = check_image(image)
    y_org = predict(classifier, img).label
    masked, mask = random_mask(img, box, spec)
    inpainted = inpaint(backend, masked, mask)
    y_new = predict(classifier, inpainted).label
    if y_new != y_org:
        return MitigationResult(y_new, True, masked, inpainted,
                                {"original": y_org, "inpainted": y_new})
    return MitigationResult(y_org, False, masked, inpainted,
                            {"original": y_org, "inpainted": y_new})
