"""Noise-averaged saliency maps, average-filter pre-processing, and box localisation.

The map for class j is the noise-averaged, channel-reduced magnitude of
d(logit_j)/d(pixel). Average filtering keeps dense high-influence regions
(adversarial patches) salient while washing out sparse natural features, after
which the most/least influential axis-aligned boxes can be located.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .images import to_torch
from .model_zoo import Classifier


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle, (top, left) inclusive, height x width pixels."""

    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ValueError("box must have positive area")
        if self.top < 0 or self.left < 0:
            raise ValueError("box must lie inside image bounds")

    @property
    def area(self) -> int:
        return self.height * self.width

    @property
    def slices(self) -> tuple[slice, slice]:
        return (slice(self.top, self.top + self.height),
                slice(self.left, self.left + self.width))

    def iou(self, other: "Box") -> float:
        dy = min(self.top + self.height, other.top + other.height) - max(self.top, other.top)
        dx = min(self.left + self.width, other.left + other.width) - max(self.left, other.left)
        inter = max(0, dy) * max(0, dx)
        return inter / float(self.area + other.area - inter)


@dataclass(frozen=True)
class SmoothGradConfig:
    n: int = 50
    sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


@dataclass
class SaliencyMap:
    values: np.ndarray  # H x W, nonnegative
    source_class: int
    config_used: SmoothGradConfig | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("saliency values must be H x W")
        if self.values.size and self.values.min() < 0:
            raise ValueError("saliency values must be nonnegative")


def smoothgrad(classifier: Classifier, image: np.ndarray, class_index: int,
               config: SmoothGradConfig) -> SaliencyMap:
    """Average of channel-reduced |gradient| maps over n Gaussian-jittered copies.

    Each sample's signed gradient is reduced per pixel by absolute value then
    mean over channels; the n reduced maps are averaged. Noise is drawn from
    numpy with config.seed, so maps are reproducible.
    """
    if not 0 <= class_index < classifier.num_classes:
        raise ValueError(f"class index {class_index} out of range")
    img = np.asarray(image, dtype=np.float32)
    if img.shape != (classifier.input_side, classifier.input_side, 3):
        raise ValueError(f"bad image shape {img.shape}")
    rng = np.random.default_rng(config.seed)
    x = to_torch(img).to(classifier.dtype).unsqueeze(0).expand(config.n, -1, -1, -1)
    if config.sigma > 0:
        noise = rng.normal(0.0, config.sigma, size=(config.n, 3, img.shape[0], img.shape[1]))
        x = x + torch.from_numpy(noise.astype(np.float32)).to(classifier.dtype)
    x = x.detach().requires_grad_(True)
    classifier.module.eval()
    logits = classifier.module(x)
    grad, = torch.autograd.grad(logits[:, class_index].sum(), x)
    per_sample = grad.abs().mean(dim=1)          # n x H x W
    values = per_sample.mean(dim=0).double().numpy()
    return SaliencyMap(values, class_index, config)


def average_filter(saliency_map: SaliencyMap, filter_side: int) -> SaliencyMap:
    """Windowed mean with replicate padding at the borders.

    Each output pixel is the mean of the filter_side x filter_side window
    centred on it; windows hanging over an edge repeat the border pixel.
    """
    h, w = saliency_map.values.shape
    if filter_side < 1 or filter_side % 2 == 0:
        raise ValueError("filter_side must be odd and >= 1")
    if filter_side > min(h, w):
        raise ValueError("filter_side exceeds the image side")
    filtered = ndimage.uniform_filter(saliency_map.values.astype(np.float64),
                                      size=filter_side, mode="nearest")
    # separable accumulation can leave tiny negative dust on zero regions
    np.clip(filtered, 0.0, None, out=filtered)
    return SaliencyMap(filtered, saliency_map.source_class, saliency_map.config_used)


def default_filter_side(image_side: int) -> int:
    """Nearest odd integer to 0.23 * image_side."""
    raw = 0.23 * image_side
    odd = int(np.floor(raw / 2.0)) * 2 + 1
    return odd if abs(odd - raw) <= abs(odd + 2 - raw) else odd + 2


def default_box_side(image_side: int) -> int:
    """round(0.455 * image_side)."""
    return int(np.floor(0.455 * image_side + 0.5))


def _centered_box(values: np.ndarray, r: int, c: int, box_height: int,
                  box_width: int) -> Box:
    h, w = values.shape
    if box_height > h or box_width > w:
        raise ValueError("box does not fit inside the image")
    top = min(max(r - box_height // 2, 0), h - box_height)
    left = min(max(c - box_width // 2, 0), w - box_width)
    return Box(top, left, box_height, box_width)


def locate_max_box(saliency_map: SaliencyMap, box_height: int, box_width: int) -> Box:
    """Box centred on the argmax (row-major first occurrence), clamped in bounds."""
    values = saliency_map.values
    r, c = np.unravel_index(int(np.argmax(values)), values.shape)
    return _centered_box(values, int(r), int(c), box_height, box_width)


def locate_min_box(saliency_map: SaliencyMap, box_height: int, box_width: int) -> Box:
    """Box centred on the argmin (row-major first occurrence), clamped in bounds."""
    values = saliency_map.values
    r, c = np.unravel_index(int(np.argmin(values)), values.shape)
    return _centered_box(values, int(r), int(c), box_height, box_width)
