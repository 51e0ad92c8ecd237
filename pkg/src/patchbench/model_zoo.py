"""Classifier under attack/defense: desk-scale data, training, prediction, input gradients.

The classifier is a small rectifier CNN wrapped in a uniform handle that exposes
prediction and d(logit)/d(pixel) computation. The backward pass of every
rectifier can be swapped for a parametric softplus derivative while the forward
pass stays bit-identical, which is what the saliency-suppression attack needs.
"""
from __future__ import annotations

import copy
import io
import json
import re
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .images import from_torch, to_torch

CHECKPOINT_MAGIC = b"PBCK"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    """A labelled image set: N images of shape side x side x 3 in [0, 1]."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    side: int

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.shape[1:] != (self.side, self.side, 3):
            raise ValueError(
                f"images must be (N, {self.side}, {self.side}, 3), got {self.images.shape}"
            )
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels must be one class id per image")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return self.images.shape[0]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.side)


@dataclass
class TrainConfig:
    epochs: int
    learning_rate: float = 1e-3
    seed: int = 0
    batch_size: int = 64
    holdout_fraction: float = 0.15
    architecture: str = "convnet4-w16"


@dataclass
class GradientRequest:
    image: np.ndarray
    class_index: int


@dataclass
class Classifier:
    """Uniform handle over a trained torch module.

    Immutable after training: prediction and gradient calls never mutate
    parameters, so read-only use from parallel workers is safe.
    """

    architecture_id: str
    module: nn.Module
    num_classes: int
    input_side: int
    version: int = CHECKPOINT_VERSION
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.module.eval()

    @property
    def dtype(self) -> torch.dtype:
        return next(self.module.parameters()).dtype


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------

class Rectifier(nn.Module):
    """ReLU whose backward pass can be swapped for a parametric softplus derivative.

    In softplus mode the forward value is still relu(x) bit-for-bit (the
    softplus term cancels itself exactly); only the gradient path changes to
    d/dx softplus(x; alpha) = sigmoid(alpha * x), which is smooth, so second
    derivatives no longer vanish.
    """

    def __init__(self):
        super().__init__()
        self.backward_mode = "relu"
        self.alpha = 10.0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.backward_mode == "relu":
            return F.relu(x)
        sp = F.softplus(x, beta=self.alpha)
        return F.relu(x).detach() + (sp - sp.detach())

    def extra_repr(self) -> str:
        return f"backward_mode={self.backward_mode}, alpha={self.alpha}"


@contextmanager
def rectifier_backward(module: nn.Module, mode: str, alpha: float = 10.0):
    """Temporarily set the backward mode of every Rectifier in `module`."""
    if mode not in ("relu", "softplus"):
        raise ValueError(f"unknown backward mode {mode!r}")
    if mode == "softplus" and not alpha > 0:
        raise ValueError("alpha must be > 0 for softplus backward")
    rects = [m for m in module.modules() if isinstance(m, Rectifier)]
    saved = [(r.backward_mode, r.alpha) for r in rects]
    for r in rects:
        r.backward_mode = mode
        r.alpha = float(alpha)
    try:
        yield
    finally:
        for r, (m, a) in zip(rects, saved):
            r.backward_mode = m
            r.alpha = a


class ConvNet4(nn.Module):
    """Four conv blocks with rectifier activations, then a two-layer head."""

    def __init__(self, width: int, num_classes: int, input_side: int):
        super().__init__()
        if input_side % 16 != 0:
            raise ValueError("input_side must be divisible by 16")
        w = width
        self.features = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), Rectifier(), nn.MaxPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1), Rectifier(), nn.MaxPool2d(2),
            nn.Conv2d(2 * w, 4 * w, 3, padding=1), Rectifier(), nn.MaxPool2d(2),
            nn.Conv2d(4 * w, 4 * w, 3, padding=1), Rectifier(), nn.MaxPool2d(2),
        )
        feat = 4 * w * (input_side // 16) ** 2
        self.classifier = nn.Sequential(
            nn.Flatten(),
            nn.Linear(feat, 8 * w), Rectifier(),
            nn.Linear(8 * w, num_classes),
        )

    def forward(self, x):
        return self.classifier(self.features(x))


class LinearProbe(nn.Module):
    """f(x) = W.flatten(x) + b; the input gradient for class j is exactly row j of W."""

    def __init__(self, num_classes: int, input_side: int):
        super().__init__()
        self.flatten = nn.Flatten()
        self.fc = nn.Linear(3 * input_side * input_side, num_classes)

    def forward(self, x):
        return self.fc(self.flatten(x))


def build_module(architecture_id: str, num_classes: int, input_side: int) -> nn.Module:
    if architecture_id == "linear":
        return LinearProbe(num_classes, input_side)
    m = re.fullmatch(r"convnet4-w(\d+)", architecture_id)
    if m:
        return ConvNet4(int(m.group(1)), num_classes, input_side)
    raise ValueError(f"unknown architecture id {architecture_id!r}")


def make_classifier(architecture_id: str, num_classes: int, input_side: int,
                    seed: int = 0) -> Classifier:
    """Untrained classifier with seeded weight init (useful for probes and tests)."""
    torch.manual_seed(seed)
    module = build_module(architecture_id, num_classes, input_side)
    return Classifier(architecture_id, module, num_classes, input_side,
                      metadata={"seed": seed, "trained": False})


def clone_as_double(classifier: Classifier) -> Classifier:
    """Deep copy with float64 parameters (for high-precision gradient checks)."""
    module = copy.deepcopy(classifier.module).double()
    return Classifier(classifier.architecture_id, module, classifier.num_classes,
                      classifier.input_side, classifier.version,
                      dict(classifier.metadata))


# ---------------------------------------------------------------------------
# Desk-scale dataset
# ---------------------------------------------------------------------------

CLASS_NAMES = (
    "h-stripes", "v-stripes", "d-stripes", "checker", "disc",
    "ring", "triangle", "cross", "dots", "frame",
)


def _triangle_mask(side, rng):
    # three vertices jittered inside thirds of the canvas, filled by sign test
    v = np.array([
        [rng.uniform(0.05, 0.25) * side, rng.uniform(0.3, 0.7) * side],
        [rng.uniform(0.7, 0.95) * side, rng.uniform(0.02, 0.35) * side],
        [rng.uniform(0.7, 0.95) * side, rng.uniform(0.65, 0.98) * side],
    ])
    yy, xx = np.mgrid[0:side, 0:side] + 0.5
    def edge(a, b):
        return (b[0] - a[0]) * (xx - a[1]) - (b[1] - a[1]) * (yy - a[0])
    e0, e1, e2 = edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0])
    return ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))


def _pattern_mask(label: int, side: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    if label <= 2:  # stripes
        period = rng.integers(max(4, side // 8), max(6, side // 4) + 1)
        phase = rng.integers(0, period)
        coord = (yy, xx, xx + yy)[label]
        return ((coord + phase) // period) % 2 == 0
    if label == 3:  # checkerboard
        period = rng.integers(max(4, side // 8), max(6, side // 5) + 1)
        py, px = rng.integers(0, period, size=2)
        return (((yy + py) // period) + ((xx + px) // period)) % 2 == 0
    if label in (4, 5):  # disc / ring
        cy = side / 2 + rng.uniform(-0.1, 0.1) * side
        cx = side / 2 + rng.uniform(-0.1, 0.1) * side
        r = rng.uniform(0.25, 0.38) * side
        d = np.hypot(yy + 0.5 - cy, xx + 0.5 - cx)
        if label == 4:
            return d < r
        thick = rng.uniform(0.07, 0.13) * side
        return (d < r) & (d > r - thick)
    if label == 6:
        return _triangle_mask(side, rng)
    if label == 7:  # cross
        cy = side / 2 + rng.uniform(-0.08, 0.08) * side
        cx = side / 2 + rng.uniform(-0.08, 0.08) * side
        arm = rng.uniform(0.08, 0.14) * side
        span = rng.uniform(0.3, 0.45) * side
        near_y = np.abs(yy + 0.5 - cy) < arm
        near_x = np.abs(xx + 0.5 - cx) < arm
        reach_y = np.abs(yy + 0.5 - cy) < span
        reach_x = np.abs(xx + 0.5 - cx) < span
        return (near_y & reach_x) | (near_x & reach_y)
    if label == 8:  # dot field
        mask = np.zeros((side, side), dtype=bool)
        step = side // 4
        for gy in range(4):
            for gx in range(4):
                cy = (gy + 0.5) * step + rng.uniform(-0.25, 0.25) * step
                cx = (gx + 0.5) * step + rng.uniform(-0.25, 0.25) * step
                r = rng.uniform(0.06, 0.09) * side
                mask |= np.hypot(yy + 0.5 - cy, xx + 0.5 - cx) < r
        return mask
    if label == 9:  # nested square frames
        cy = side / 2 + rng.uniform(-0.06, 0.06) * side
        cx = side / 2 + rng.uniform(-0.06, 0.06) * side
        d = np.maximum(np.abs(yy + 0.5 - cy), np.abs(xx + 0.5 - cx))
        r1 = rng.uniform(0.3, 0.4) * side
        t = rng.uniform(0.05, 0.08) * side
        gap = rng.uniform(0.1, 0.14) * side
        return ((d < r1) & (d > r1 - t)) | ((d < r1 - t - gap) & (d > r1 - 2 * t - gap))
    raise ValueError(f"no pattern for label {label}")


def make_shapes_dataset(num_images: int, side: int = 64, num_classes: int = 10,
                        seed: int = 0, noise: float = 0.04) -> Dataset:
    """Procedural 10-class pattern dataset (stripes, checker, disc, ring, ...).

    Classes are global geometric patterns with randomized colors, geometry
    jitter and additive pixel noise; labels cycle 0..num_classes-1 so any
    contiguous slice is class-balanced.
    """
    if not 1 <= num_classes <= len(CLASS_NAMES):
        raise ValueError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
    rng = np.random.default_rng(seed)
    images = np.empty((num_images, side, side, 3), dtype=np.float32)
    labels = np.empty(num_images, dtype=np.int64)
    for i in range(num_images):
        label = i % num_classes
        bg = rng.uniform(0.0, 1.0, size=3)
        fg = rng.uniform(0.0, 1.0, size=3)
        while np.linalg.norm(fg - bg) < 0.45:
            fg = rng.uniform(0.0, 1.0, size=3)
        mask = _pattern_mask(label, side, rng).astype(np.float32)[..., None]
        img = bg[None, None, :] * (1.0 - mask) + fg[None, None, :] * mask
        img = img + rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0, out=img)
        labels[i] = label
    return Dataset(images, labels, num_classes, side)


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def train_classifier(dataset: Dataset, train_config: TrainConfig) -> Classifier:
    """Train a convnet4 on the dataset; clean hold-out accuracy lands in metadata.

    Deterministic given the seed: weight init, shuffling and batching are all
    driven by it, and torch runs on CPU. A non-finite loss aborts training.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    if dataset.num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    cfg = train_config
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    n = len(dataset)
    n_hold = max(1, int(round(n * cfg.holdout_fraction))) if n > 1 else 0
    perm = rng.permutation(n)
    train_idx, hold_idx = perm[: n - n_hold], perm[n - n_hold:]

    arch = cfg.architecture
    module = build_module(arch, dataset.num_classes, dataset.side)
    module.train()
    opt = torch.optim.Adam(module.parameters(), lr=cfg.learning_rate)

    x_all = to_torch(dataset.images)
    y_all = torch.from_numpy(dataset.labels)
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        for start in range(0, len(order), cfg.batch_size):
            batch = torch.from_numpy(order[start: start + cfg.batch_size])
            logits = module(x_all[batch])
            loss = F.cross_entropy(logits, y_all[batch])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, "
                    f"batch offset {start}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
    module.eval()

    clf = Classifier(arch, module, dataset.num_classes, dataset.side,
                     metadata={"seed": cfg.seed, "epochs": cfg.epochs,
                               "learning_rate": cfg.learning_rate,
                               "train_size": int(len(train_idx)),
                               "holdout_size": int(len(hold_idx)),
                               "trained": True})
    if len(hold_idx) > 0:
        labels, _ = predict_batch(clf, dataset.images[hold_idx])
        acc = float(np.mean(labels == dataset.labels[hold_idx]))
    else:
        acc = float("nan")
    clf.metadata["clean_accuracy"] = acc
    return clf


@dataclass
class Prediction:
    label: int
    confidence: float


def logits_batch(classifier: Classifier, images: np.ndarray,
                 batch_size: int = 256) -> np.ndarray:
    """Raw logits for a stack of NHWC images."""
    imgs = np.asarray(images, dtype=np.float32)
    if imgs.ndim == 3:
        imgs = imgs[None]
    if imgs.shape[1:3] != (classifier.input_side, classifier.input_side):
        raise ValueError(
            f"image side {imgs.shape[1:3]} does not match classifier input "
            f"side {classifier.input_side}"
        )
    outs = []
    classifier.module.eval()
    with torch.no_grad():
        for start in range(0, imgs.shape[0], batch_size):
            x = to_torch(imgs[start: start + batch_size]).to(classifier.dtype)
            outs.append(classifier.module(x).numpy())
    return np.concatenate(outs, axis=0)


def predict_batch(classifier: Classifier, images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Labels and confidences for a stack of images; argmax ties break low."""
    logits = logits_batch(classifier, images)
    labels = np.argmax(logits, axis=1)  # np.argmax returns the first (lowest) max index
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    conf = probs[np.arange(len(labels)), labels]
    return labels.astype(np.int64), conf.astype(np.float64)


def predict(classifier: Classifier, image: np.ndarray) -> Prediction:
    """Deterministic top-1 prediction; rejects images of the wrong shape."""
    labels, conf = predict_batch(classifier, np.asarray(image)[None])
    return Prediction(int(labels[0]), float(conf[0]))


def input_gradient(classifier: Classifier, request: GradientRequest,
                   backward_mode: str = "relu", alpha: float = 10.0) -> np.ndarray:
    """Signed d(logit of class j)/d(pixel) as an H x W x 3 array.

    backward_mode "softplus" substitutes sigmoid(alpha*x) for the rectifier
    derivative in the backward pass only; forward logits are unchanged.
    """
    if not 0 <= request.class_index < classifier.num_classes:
        raise ValueError(f"class index {request.class_index} out of range")
    img = np.asarray(request.image, dtype=np.float32)
    if img.shape != (classifier.input_side, classifier.input_side, 3):
        raise ValueError(f"bad image shape {img.shape}")
    x = to_torch(img).to(classifier.dtype).unsqueeze(0).requires_grad_(True)
    classifier.module.eval()
    with rectifier_backward(classifier.module, backward_mode, alpha):
        logits = classifier.module(x)
        grad, = torch.autograd.grad(logits[0, request.class_index], x)
    return grad[0].permute(1, 2, 0).contiguous().numpy().copy()


def save_dataset(dataset: Dataset, path: str) -> None:
    """Portable npz archive: images (N,H,W,3) float32, labels, class count, side."""
    with open(path, "wb") as f:
        np.savez(f, images=dataset.images, labels=dataset.labels,
                 num_classes=np.int64(dataset.num_classes),
                 side=np.int64(dataset.side))


def load_dataset(path: str) -> Dataset:
    with np.load(path) as z:
        return Dataset(z["images"], z["labels"], int(z["num_classes"]),
                       int(z["side"]))


# ---------------------------------------------------------------------------
# Checkpoint IO
# ---------------------------------------------------------------------------

def save_checkpoint(classifier: Classifier, path: str) -> None:
    """Versioned binary blob: magic, version, JSON header, torch state_dict."""
    header = json.dumps({
        "format_version": CHECKPOINT_VERSION,
        "architecture_id": classifier.architecture_id,
        "num_classes": classifier.num_classes,
        "input_side": classifier.input_side,
        "metadata": classifier.metadata,
    }, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    torch.save(classifier.module.state_dict(), buf)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(buf.getvalue())


def load_checkpoint(path: str) -> Classifier:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a classifier checkpoint")
        version, = struct.unpack("<I", f.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header_len, = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len).decode("utf-8"))
        payload = f.read()
    module = build_module(header["architecture_id"], header["num_classes"],
                          header["input_side"])
    module.load_state_dict(torch.load(io.BytesIO(payload), weights_only=True))
    return Classifier(header["architecture_id"], module, header["num_classes"],
                      header["input_side"], version, header["metadata"])
