"""8-bit PNG I/O mapped linearly to the model's [-1, 1] value range."""

from __future__ import annotations

import numpy as np
from PIL import Image


class UnsupportedImageError(ValueError):
    pass


def load_image(path):
    """Read an 8-bit grayscale or RGB PNG as a (C,H,W) float32 array in [-1,1]."""
    try:
        img = Image.open(path)
        img.load()
    except FileNotFoundError:
        raise
    except Exception as e:
        raise UnsupportedImageError(f"cannot read image {path}: {e}") from e
    if img.mode == "L":
        arr = np.asarray(img, dtype=np.float32)[None]
    elif img.mode == "RGB":
        arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1)
    else:
        raise UnsupportedImageError(f"unsupported image mode {img.mode!r} (need 8-bit L or RGB)")
    return (arr / 255.0 * 2.0 - 1.0).astype(np.float32)


def save_image(arr, path):
    """Write a (C,H,W) array in [-1,1] as 8-bit PNG (clamp, round half up)."""
    arr = np.asarray(arr)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"expected (C,H,W) with 1 or 3 channels, got {arr.shape}")
    clamped = np.clip(arr, -1.0, 1.0)
    quant = np.floor((clamped + 1.0) / 2.0 * 255.0 + 0.5).astype(np.uint8)
    if quant.shape[0] == 1:
        img = Image.fromarray(quant[0], mode="L")
    else:
        img = Image.fromarray(quant.transpose(1, 2, 0), mode="RGB")
    img.save(path, format="PNG")
