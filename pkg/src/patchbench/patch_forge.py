"""Universal adversarial patch synthesis and attack-success evaluation.

A patch is a small pixel region plus a binary silhouette mask. Training runs
projected gradient ascent on the expected target-class log-probability over
random images, placements and transforms (rotation / scale / brightness), with
each epoch warm-started from the previous one and the best epoch (by held-out
success rate) kept. Two adaptive variants model defense-aware attackers: one
penalises the patch's own noise-averaged saliency (with a smooth rectifier
backward pass so the penalty has usable curvature), the other randomly drops a
fraction of the patch every step to survive defensive masking.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .images import check_image, from_torch, load_png, save_png, to_torch
from .model_zoo import Classifier, predict_batch, rectifier_backward

logger = logging.getLogger(__name__)

PATCH_SHAPES = ("square", "rectangle", "circle")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PatchSpec:
    shape: str
    area_fraction: float
    target_class: int
    rect_ratio: float = 1.5  # width:height for rectangle patches (6:4 default)

    def __post_init__(self):
        if self.shape not in PATCH_SHAPES:
            raise ValueError(f"shape must be one of {PATCH_SHAPES}")
        if not 0.0 < self.area_fraction <= 0.15:
            raise ValueError("area_fraction must lie in (0, 0.15]")
        if self.shape == "rectangle" and self.rect_ratio <= 0:
            raise ValueError("rect_ratio must be positive")


def patch_dims(spec: PatchSpec, image_side: int) -> tuple[int, int]:
    """Pixel dimensions (height, width) of the patch canvas for an image side."""
    area = spec.area_fraction * image_side * image_side
    if spec.shape == "square":
        side = max(1, round(math.sqrt(area)))
        dims = (side, side)
    elif spec.shape == "rectangle":
        h = max(1, round(math.sqrt(area / spec.rect_ratio)))
        w = max(1, round(spec.rect_ratio * h))
        dims = (h, w)
    else:  # circle: canvas is the bounding square of the disc
        radius = math.sqrt(area / math.pi)
        side = max(1, round(2 * radius))
        dims = (side, side)
    if dims[0] > image_side or dims[1] > image_side:
        raise ValueError("patch does not fit inside the image")
    return dims


def shape_mask(spec: PatchSpec, image_side: int) -> np.ndarray:
    """Binary silhouette (height x width float32): 1 on the patch, 0 elsewhere."""
    h, w = patch_dims(spec, image_side)
    if spec.shape in ("square", "rectangle"):
        return np.ones((h, w), dtype=np.float32)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    radius = math.sqrt(spec.area_fraction * image_side * image_side / math.pi)
    d = np.hypot(yy - h / 2.0, xx - w / 2.0)
    return (d <= radius).astype(np.float32)


@dataclass
class AdversarialPatch:
    pixels: np.ndarray       # height x width x 3, values in [0, 1]
    shape_mask: np.ndarray   # height x width binary
    spec: PatchSpec
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pixels = check_image(self.pixels)
        self.shape_mask = np.ascontiguousarray(self.shape_mask, dtype=np.float32)
        if self.shape_mask.shape != self.pixels.shape[:2]:
            raise ValueError("shape_mask must match patch pixel dims")
        if not np.all((self.shape_mask == 0) | (self.shape_mask == 1)):
            raise ValueError("shape_mask must be binary")

    @property
    def dims(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]

    def eot_config(self) -> "EotConfig":
        """The transform distribution the patch was trained under (or defaults)."""
        eot = self.metadata.get("eot")
        if not eot:
            return EotConfig()
        return EotConfig(rotation=tuple(eot["rotation"]),
                         scale=tuple(eot["scale"]),
                         brightness=tuple(eot["brightness"]))


@dataclass(frozen=True)
class Placement:
    location: tuple[int, int]     # top-left (row, col) of the untransformed patch box
    rotation_deg: float = 0.0     # about the patch centre
    scale: float = 1.0
    brightness: float = 0.0


@dataclass(frozen=True)
class EotConfig:
    rotation: tuple[float, float] = (-20.0, 20.0)
    scale: tuple[float, float] = (0.8, 1.2)
    brightness: tuple[float, float] = (-0.1, 0.1)
    # location distribution is always uniform over valid positions

    def __post_init__(self):
        for name in ("rotation", "scale", "brightness"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range is empty")
        if self.scale[0] <= 0:
            raise ValueError("scale must be positive")


IDENTITY_EOT = EotConfig(rotation=(0.0, 0.0), scale=(1.0, 1.0), brightness=(0.0, 0.0))


@dataclass
class PatchTrainConfig:
    epochs: int
    steps: int = 30
    learning_rate: float = 4.0
    seed: int = 0
    batch_size: int = 32
    val_fraction: float = 0.2


# ---------------------------------------------------------------------------
# Placement geometry
# ---------------------------------------------------------------------------

def _placed_half_extents(ph: int, pw: int, rotation_deg: float, scale: float
                         ) -> tuple[float, float]:
    """Half-heights/widths of the rotated, scaled patch rectangle."""
    th = math.radians(rotation_deg)
    c, s = abs(math.cos(th)), abs(math.sin(th))
    return 0.5 * scale * (ph * c + pw * s), 0.5 * scale * (pw * c + ph * s)


def placement_valid(placement: Placement, image_side: int, ph: int, pw: int) -> bool:
    hy, hx = _placed_half_extents(ph, pw, placement.rotation_deg, placement.scale)
    cy = placement.location[0] + ph / 2.0
    cx = placement.location[1] + pw / 2.0
    eps = 1e-6
    return (cy - hy >= -eps and cy + hy <= image_side + eps
            and cx - hx >= -eps and cx + hx <= image_side + eps)


def placed_bounding_box(placement: Placement, image_side: int, ph: int, pw: int):
    """Integer bounding box of the transformed patch, clipped to the image."""
    from .saliency import Box
    hy, hx = _placed_half_extents(ph, pw, placement.rotation_deg, placement.scale)
    cy = placement.location[0] + ph / 2.0
    cx = placement.location[1] + pw / 2.0
    top = max(0, int(math.floor(cy - hy)))
    left = max(0, int(math.floor(cx - hx)))
    bottom = min(image_side, int(math.ceil(cy + hy)))
    right = min(image_side, int(math.ceil(cx + hx)))
    return Box(top, left, max(1, bottom - top), max(1, right - left))


def sample_placement(rng: np.random.Generator, eot: EotConfig, image_side: int,
                     patch_height: int, patch_width: int) -> Placement:
    """One placement draw: rotation, scale, brightness, then a uniform valid location.

    Draw order is part of the reproducibility contract. The location is an
    integer top-left, uniform over all positions keeping the transformed patch
    fully inside the image.
    """
    rotation = float(rng.uniform(*eot.rotation))
    scale = float(rng.uniform(*eot.scale))
    brightness = float(rng.uniform(*eot.brightness))
    hy, hx = _placed_half_extents(patch_height, patch_width, rotation, scale)
    eps = 1e-9
    r_lo = math.ceil(hy - patch_height / 2.0 - eps)
    r_hi = math.floor(image_side - hy - patch_height / 2.0 + eps)
    c_lo = math.ceil(hx - patch_width / 2.0 - eps)
    c_hi = math.floor(image_side - hx - patch_width / 2.0 + eps)
    if r_hi < r_lo or c_hi < c_lo:
        raise ValueError("no valid placement: transformed patch exceeds the image")
    row = int(rng.integers(r_lo, r_hi + 1))
    col = int(rng.integers(c_lo, c_hi + 1))
    return Placement((row, col), rotation, scale, brightness)


# ---------------------------------------------------------------------------
# Differentiable patch application
# ---------------------------------------------------------------------------

def _compose(images: torch.Tensor, patch: torch.Tensor, masks: torch.Tensor,
             placements: list[Placement]) -> tuple[torch.Tensor, torch.Tensor]:
    """Place one patch into a batch of images, one placement per image.

    images: N x C x H x W; patch: C x ph x pw (may require grad);
    masks: N x ph x pw binary silhouettes (per-image to allow random drops).
    Returns (composited N x C x H x W, placed boolean masks N x H x W).
    Identity transforms take an exact paste path; others go through bilinear
    grid sampling with the silhouette binarised at 0.5.
    """
    n, _, h, w = images.shape
    ph, pw = patch.shape[1], patch.shape[2]
    if len(placements) != n or masks.shape != (n, ph, pw):
        raise ValueError("one placement and one mask per image required")
    out = images.clone()
    placed = torch.zeros((n, h, w), dtype=torch.bool)

    ident = [i for i, p in enumerate(placements)
             if p.rotation_deg == 0.0 and p.scale == 1.0]
    rest = [i for i in range(n) if i not in set(ident)]

    for i in ident:
        p = placements[i]
        r0, c0 = p.location
        if r0 < 0 or c0 < 0 or r0 + ph > h or c0 + pw > w:
            raise ValueError(f"placement {p} out of bounds")
        bright = torch.clamp(patch + p.brightness, 0.0, 1.0)
        m = masks[i].bool()
        region = out[i, :, r0:r0 + ph, c0:c0 + pw]
        out[i, :, r0:r0 + ph, c0:c0 + pw] = torch.where(m.unsqueeze(0), bright, region)
        placed[i, r0:r0 + ph, c0:c0 + pw] = m

    if rest:
        for i in rest:
            if not placement_valid(placements[i], h, ph, pw):
                raise ValueError(f"placement {placements[i]} out of bounds")
        canvas_m = torch.zeros((len(rest), 1, h, w))
        brights = []
        for j, i in enumerate(rest):
            brights.append(torch.clamp(patch + placements[i].brightness, 0.0, 1.0))
            canvas_m[j, 0, :ph, :pw] = masks[i]
        canvas_p = torch.zeros((len(rest), patch.shape[0], h, w), dtype=patch.dtype)
        canvas_p[:, :, :ph, :pw] = torch.stack(brights)

        # output pixel centres -> source coordinates (inverse transform)
        gy, gx = torch.meshgrid(torch.arange(h, dtype=torch.float32) + 0.5,
                                torch.arange(w, dtype=torch.float32) + 0.5,
                                indexing="ij")
        grids = []
        for i in rest:
            p = placements[i]
            th = math.radians(p.rotation_deg)
            cos_t, sin_t = math.cos(th), math.sin(th)
            tc_y = p.location[0] + ph / 2.0
            tc_x = p.location[1] + pw / 2.0
            dy, dx = gy - tc_y, gx - tc_x
            src_y = (cos_t * dy + sin_t * dx) / p.scale + ph / 2.0
            src_x = (-sin_t * dy + cos_t * dx) / p.scale + pw / 2.0
            grids.append(torch.stack([2.0 * src_x / w - 1.0,
                                      2.0 * src_y / h - 1.0], dim=-1))
        grid = torch.stack(grids)  # len(rest) x H x W x 2
        p_soft = F.grid_sample(canvas_p, grid.to(patch.dtype), mode="bilinear",
                               padding_mode="zeros", align_corners=False)
        m_soft = F.grid_sample(canvas_m, grid, mode="bilinear",
                               padding_mode="zeros", align_corners=False)[:, 0]
        m_bin = m_soft > 0.5
        p_fixed = torch.clamp(p_soft / torch.clamp(m_soft, min=1e-6).unsqueeze(1),
                              0.0, 1.0)
        for j, i in enumerate(rest):
            keep = m_bin[j].unsqueeze(0)
            out[i] = torch.where(keep, p_fixed[j].to(out.dtype), out[i])
            placed[i] = m_bin[j]
    return out, placed


def apply_patch(image: np.ndarray, patch: AdversarialPatch,
                placement: Placement) -> np.ndarray:
    """Composite per x' = (1-m) * x + m * delta with the placed, transformed mask.

    Pixels outside the placed mask are bit-identical to the input. Out-of-bounds
    placements are rejected.
    """
    img = check_image(image)
    ph, pw = patch.dims
    if not placement_valid(placement, img.shape[0], ph, pw):
        raise ValueError(f"placement {placement} out of bounds for side {img.shape[0]}")
    x = to_torch(img).unsqueeze(0)
    p = to_torch(patch.pixels)
    m = torch.from_numpy(patch.shape_mask).unsqueeze(0)
    out, _ = _compose(x, p, m, [placement])
    return from_torch(out[0])


def apply_patch_batch(images: np.ndarray, patch: AdversarialPatch,
                      placements: list[Placement]) -> np.ndarray:
    """Vectorised apply_patch over a stack of images with per-image placements."""
    x = to_torch(np.asarray(images, dtype=np.float32))
    p = to_torch(patch.pixels)
    m = torch.from_numpy(patch.shape_mask).unsqueeze(0).expand(x.shape[0], -1, -1)
    out, _ = _compose(x, p, m.contiguous(), placements)
    return from_torch(out)


# ---------------------------------------------------------------------------
# Attack evaluation
# ---------------------------------------------------------------------------

def _drop_mask_entries(mask: np.ndarray, fraction: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Zero a random `fraction` of the nonzero silhouette entries."""
    if fraction <= 0:
        return mask
    flat = mask.reshape(-1)
    nz = np.flatnonzero(flat)
    n_drop = int(round(fraction * nz.size))
    dropped = flat.copy()
    if n_drop:
        dropped[rng.permutation(nz)[:n_drop]] = 0.0
    return dropped.reshape(mask.shape)


def attack_success_rate(classifier: Classifier, patch: AdversarialPatch,
                        test_images: np.ndarray, eot: EotConfig,
                        trials_per_image: int = 1, seed: int = 0,
                        mask_fraction: float = 0.0) -> float:
    """Fraction of (image, placement) trials predicted as the target class.

    Images whose clean prediction is already the target class are excluded.
    mask_fraction > 0 evaluates the patch under defensive masking: a fresh
    random fraction of silhouette entries is dropped per trial.
    """
    imgs = np.asarray(test_images, dtype=np.float32)
    if imgs.ndim == 3:
        imgs = imgs[None]
    if imgs.shape[0] == 0:
        raise ValueError("empty test set")
    target = patch.spec.target_class
    clean_labels, _ = predict_batch(classifier, imgs)
    eligible = clean_labels != target
    if not eligible.any():
        return 0.0
    rng = np.random.default_rng(seed)
    side = imgs.shape[1]
    ph, pw = patch.dims
    pool = imgs[eligible]
    hits = 0
    for _ in range(trials_per_image):
        placements = [sample_placement(rng, eot, side, ph, pw)
                      for _ in range(pool.shape[0])]
        masks = np.stack([_drop_mask_entries(patch.shape_mask, mask_fraction, rng)
                          for _ in range(pool.shape[0])])
        x = to_torch(pool)
        with torch.no_grad():
            adv, _ = _compose(x, to_torch(patch.pixels), torch.from_numpy(masks),
                              placements)
        labels, _ = predict_batch(classifier, from_torch(adv))
        hits += int(np.sum(labels == target))
    return hits / float(pool.shape[0] * trials_per_image)


# ---------------------------------------------------------------------------
# Patch training
# ---------------------------------------------------------------------------

def _train_val_split(images: np.ndarray, rng: np.random.Generator,
                     val_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    n = images.shape[0]
    n_val = max(1, int(round(n * val_fraction))) if n > 1 else 0
    perm = rng.permutation(n)
    return images[perm[: n - n_val]], images[perm[n - n_val:]]


def _val_asr(classifier, pixels, mask, spec, val_images, eot, seed,
             mask_fraction=0.0) -> float:
    patch = AdversarialPatch(np.clip(pixels, 0.0, 1.0), mask, spec)
    return attack_success_rate(classifier, patch, val_images, eot,
                               trials_per_image=1, seed=seed,
                               mask_fraction=mask_fraction)


def _train_hash(images: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(images, dtype=np.float32).tobytes()
                          ).hexdigest()[:16]


def _run_patch_optimization(classifier: Classifier, train_images: np.ndarray,
                            spec: PatchSpec, eot: EotConfig,
                            opt: PatchTrainConfig, *, mode: str,
                            step_loss_fn, mask_fraction: float = 0.0,
                            softplus_backward: bool = False,
                            extra_metadata: dict | None = None) -> AdversarialPatch:
    """Shared projected-gradient-ascent loop with warm-started epochs.

    step_loss_fn(x_adv, placed_mask, target_vec, state) -> scalar loss to
    minimise (negative objective). Returns the patch from the epoch with the
    highest held-out success rate.
    """
    imgs = np.asarray(train_images, dtype=np.float32)
    if imgs.shape[0] == 0:
        raise ValueError("train_images is empty")
    side = classifier.input_side
    target = spec.target_class
    if not 0 <= target < classifier.num_classes:
        raise ValueError("target class out of range")
    rng = np.random.default_rng(opt.seed)
    mask = shape_mask(spec, side)
    ph, pw = mask.shape
    opt_imgs, val_imgs = _train_val_split(imgs, rng, opt.val_fraction)
    if len(val_imgs) == 0:
        val_imgs = opt_imgs

    delta = rng.uniform(0.0, 1.0, size=(ph, pw, 3)).astype(np.float32)
    val_seed = int(rng.integers(2 ** 31))
    asr_by_epoch: list[float] = []
    state: dict = {"epoch_logs": []}

    best_pixels = delta.copy()
    best_asr = -1.0
    if opt.epochs == 0:
        best_asr = _val_asr(classifier, delta, mask, spec, val_imgs, eot,
                            val_seed, mask_fraction)

    delta_t = torch.from_numpy(delta).permute(2, 0, 1).contiguous()
    batch = min(opt.batch_size, opt_imgs.shape[0])
    zero_grad_steps = 0
    total_steps = 0
    for epoch in range(opt.epochs):
        state["epoch_penalties"] = []
        for _ in range(opt.steps):
            idx = rng.choice(opt_imgs.shape[0], size=batch, replace=False)
            placements = [sample_placement(rng, eot, side, ph, pw)
                          for _ in range(batch)]
            masks_np = np.stack([
                _drop_mask_entries(mask, mask_fraction, rng) for _ in range(batch)
            ]) if mask_fraction > 0 else np.broadcast_to(mask, (batch, ph, pw)).copy()
            x = to_torch(opt_imgs[idx])
            delta_t = delta_t.detach().requires_grad_(True)
            backward_ctx = rectifier_backward(classifier.module, "softplus") \
                if softplus_backward else rectifier_backward(classifier.module, "relu")
            with backward_ctx:
                x_adv, placed = _compose(x, delta_t, torch.from_numpy(masks_np),
                                         placements)
                loss = step_loss_fn(x_adv, placed, target, state)
                grad, = torch.autograd.grad(loss, delta_t)
            if not torch.isfinite(grad).all():
                raise RuntimeError("non-finite patch gradient; aborting")
            if grad.abs().max().item() == 0.0:
                zero_grad_steps += 1
                if total_steps < 5 and zero_grad_steps >= 5:
                    raise RuntimeError(
                        "no gradient flow into the patch after 5 steps: "
                        "the model appears dead (all-zero rectifier gradients)")
            else:
                zero_grad_steps = 0
            total_steps += 1
            with torch.no_grad():
                delta_t = torch.clamp(delta_t - opt.learning_rate * grad, 0.0, 1.0)
        if state["epoch_penalties"]:
            state["epoch_logs"].append(float(np.mean(state["epoch_penalties"])))
        pixels = delta_t.detach().permute(1, 2, 0).numpy()
        asr = _val_asr(classifier, pixels, mask, spec, val_imgs, eot, val_seed,
                       mask_fraction)
        asr_by_epoch.append(asr)
        if asr > best_asr:
            best_asr = asr
            best_pixels = np.clip(pixels, 0.0, 1.0).copy()
        logger.debug("patch %s epoch %d: held-out asr %.3f", mode, epoch, asr)

    metadata = {
        "mode": mode,
        "epochs": opt.epochs,
        "steps": opt.steps,
        "learning_rate": opt.learning_rate,
        "seed": opt.seed,
        "batch_size": batch,
        "train_set_hash": _train_hash(imgs),
        "final_asr": float(best_asr),
        "asr_by_epoch": [float(a) for a in asr_by_epoch],
        "eot": {"rotation": list(eot.rotation), "scale": list(eot.scale),
                "brightness": list(eot.brightness)},
    }
    if state["epoch_logs"]:
        metadata["penalty_by_epoch"] = state["epoch_logs"]
    if extra_metadata:
        metadata.update(extra_metadata)
    return AdversarialPatch(best_pixels, mask, spec, metadata)


def train_patch(classifier: Classifier, train_images: np.ndarray, spec: PatchSpec,
                eot: EotConfig, opt: PatchTrainConfig) -> AdversarialPatch:
    """Standard universal patch: maximise E[log Pr(target | patched image)].

    Projected gradient ascent with a fixed learning rate on the raw gradient;
    the patch is clamped to [0, 1] after every step, each epoch warm-starts
    from the last, and the epoch with the highest held-out success rate wins.
    """
    def loss_fn(x_adv, placed, target, state):
        logits = classifier.module(x_adv)
        return -F.log_softmax(logits, dim=1)[:, target].mean()

    return _run_patch_optimization(classifier, train_images, spec, eot, opt,
                                   mode="standard", step_loss_fn=loss_fn)


@dataclass
class AdaptiveSaliencyConfig:
    beta: float
    alpha: float = 10.0
    smoothgrad_n: int = 5
    sigma: float = 0.1

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")


def train_patch_adaptive_saliency(classifier: Classifier, train_images: np.ndarray,
                                  spec: PatchSpec, eot: EotConfig,
                                  opt: PatchTrainConfig,
                                  adaptive: AdaptiveSaliencyConfig) -> AdversarialPatch:
    """Detection-evading patch: log Pr(target) - beta * ||patch-region saliency||^2.

    The penalty is the squared L2 norm of the noise-averaged gradient map
    restricted to where the patch sits, pushing its influence toward zero. All
    backward passes replace the rectifier derivative with sigmoid(alpha * x) so
    the second-order signal is non-degenerate; forward passes stay ReLU.
    """
    noise_rng = np.random.default_rng(np.random.SeedSequence([opt.seed, 77]))

    def loss_fn(x_adv, placed, target, state):
        n_batch = x_adv.shape[0]
        ce = -F.log_softmax(classifier.module(x_adv), dim=1)[:, target].mean()
        n = adaptive.smoothgrad_n
        rep = x_adv.repeat(n, 1, 1, 1)
        if adaptive.sigma > 0:
            noise = noise_rng.normal(0.0, adaptive.sigma, size=rep.shape)
            rep = rep + torch.from_numpy(noise.astype(np.float32))
        logits = classifier.module(rep)
        g, = torch.autograd.grad(logits[:, target].sum(), rep, create_graph=True)
        sal = g.abs().mean(dim=1)                      # (n*B) x H x W
        sal = sal.reshape(n, n_batch, *sal.shape[1:]).mean(dim=0)
        penalty = (sal * placed.float()).pow(2).sum(dim=(1, 2)).mean()
        state["epoch_penalties"].append(float(penalty.detach()))
        return ce + adaptive.beta * penalty

    return _run_patch_optimization(
        classifier, train_images, spec, eot, opt, mode="adaptive-saliency",
        step_loss_fn=loss_fn, softplus_backward=True,
        extra_metadata={"beta": adaptive.beta, "alpha": adaptive.alpha,
                        "smoothgrad_n": adaptive.smoothgrad_n,
                        "sigma": adaptive.sigma})


def train_patch_adaptive_masking(classifier: Classifier, train_images: np.ndarray,
                                 spec: PatchSpec, eot: EotConfig,
                                 opt: PatchTrainConfig,
                                 mask_fraction: float) -> AdversarialPatch:
    """Masking-evading patch: a fresh random fraction of silhouette entries is
    zeroed at every step, so only surviving pixels carry loss and gradient.

    The reported final success rate is measured under the same masking the
    attacker trained against.
    """
    if not 0.0 <= mask_fraction <= 1.0:
        raise ValueError("mask_fraction must lie in [0, 1]")

    def loss_fn(x_adv, placed, target, state):
        logits = classifier.module(x_adv)
        return -F.log_softmax(logits, dim=1)[:, target].mean()

    return _run_patch_optimization(
        classifier, train_images, spec, eot, opt, mode="adaptive-masking",
        step_loss_fn=loss_fn, mask_fraction=mask_fraction,
        extra_metadata={"mask_fraction": mask_fraction})


# ---------------------------------------------------------------------------
# Patch IO: lossless PNG of the pixels + JSON sidecar
# ---------------------------------------------------------------------------

def _rle_encode(flat: np.ndarray) -> list[list[int]]:
    runs = []
    prev, count = int(flat[0]), 0
    for v in flat:
        v = int(v)
        if v == prev:
            count += 1
        else:
            runs.append([prev, count])
            prev, count = v, 1
    runs.append([prev, count])
    return runs


def _rle_decode(runs: list[list[int]], size: int) -> np.ndarray:
    out = np.empty(size, dtype=np.float32)
    pos = 0
    for value, count in runs:
        out[pos: pos + count] = value
        pos += count
    if pos != size:
        raise ValueError("run-length data does not match mask size")
    return out


def save_patch(patch: AdversarialPatch, path: str) -> None:
    """PNG of the patch pixels (8-bit quantised) plus a `<path>.json` sidecar."""
    save_png(patch.pixels, path)
    sidecar = {
        "format_version": 1,
        "spec": asdict(patch.spec),
        "metadata": patch.metadata,
        "height": patch.pixels.shape[0],
        "width": patch.pixels.shape[1],
        "shape_mask_rle": _rle_encode(patch.shape_mask.reshape(-1).astype(np.uint8)),
        "pixel_quantisation": "uint8 (1/255 steps)",
    }
    with open(path + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, sort_keys=True, indent=1)


def load_patch(path: str) -> AdversarialPatch:
    pixels = load_png(path)
    with open(path + ".json", "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    mask = _rle_decode(sidecar["shape_mask_rle"],
                       sidecar["height"] * sidecar["width"])
    mask = mask.reshape(sidecar["height"], sidecar["width"])
    spec = PatchSpec(**sidecar["spec"])
    return AdversarialPatch(pixels, mask, spec, sidecar["metadata"])
