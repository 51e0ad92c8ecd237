"""Image tensor conventions and small shared helpers.

Every operation in this package moves H x W x 3 float32 arrays with values in
[0, 1]. Torch tensors (C, H, W) appear only inside model/transform internals.
"""
from __future__ import annotations

import hashlib

import numpy as np
import torch
from PIL import Image


def check_image(image: np.ndarray) -> np.ndarray:
    """Validate an image array and return it as contiguous float32."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 array, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError("pixel values must lie in [0, 1]")
    return arr


def image_id(image: np.ndarray) -> int:
    """Stable 64-bit id of an image: first 8 bytes of sha256 over raw float32 bytes."""
    arr = np.ascontiguousarray(image, dtype=np.float32)
    digest = hashlib.sha256(arr.tobytes()).digest()
    return int.from_bytes(digest[:8], "big")


def to_torch(images: np.ndarray) -> torch.Tensor:
    """HWC float32 array (or NHWC batch) -> CHW (or NCHW) float32 tensor."""
    arr = np.ascontiguousarray(images, dtype=np.float32)
    t = torch.from_numpy(arr)
    if arr.ndim == 3:
        return t.permute(2, 0, 1).contiguous()
    if arr.ndim == 4:
        return t.permute(0, 3, 1, 2).contiguous()
    raise ValueError(f"expected 3 or 4 dims, got {arr.ndim}")


def from_torch(tensor: torch.Tensor) -> np.ndarray:
    """CHW (or NCHW) tensor -> HWC (or NHWC) float32 array."""
    t = tensor.detach()
    if t.dim() == 3:
        return t.permute(1, 2, 0).contiguous().numpy().astype(np.float32, copy=False)
    if t.dim() == 4:
        return t.permute(0, 2, 3, 1).contiguous().numpy().astype(np.float32, copy=False)
    raise ValueError(f"expected 3 or 4 dims, got {t.dim()}")


def save_png(image: np.ndarray, path: str) -> None:
    """Write an image to an 8-bit RGB PNG (values quantised to 1/255 steps)."""
    arr = check_image(image)
    as_u8 = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(as_u8, mode="RGB").save(path, format="PNG")


def load_png(path: str) -> np.ndarray:
    """Read an RGB PNG into an H x W x 3 float32 array in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return arr
