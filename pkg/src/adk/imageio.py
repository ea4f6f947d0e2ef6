"""8-bit PNG encode/decode with the [-1, 1] float convention used everywhere."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(127.5) - np.float32(1.0)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((np.asarray(image, dtype=np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def read_image(path: str | Path, size: int | None = None, channels: int | None = None) -> np.ndarray:
    """Decode a PNG into an ``H x W x C`` float32 array in [-1, 1]."""
    try:
        with Image.open(path) as img:
            img.load()
            if channels == 1:
                img = img.convert("L")
            elif channels == 3 or img.mode not in ("L", "RGB"):
                img = img.convert("RGB")
            if size is not None and img.size != (size, size):
                img = img.resize((size, size), Image.BILINEAR)
            arr = np.asarray(img)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return from_uint8(arr)


def read_mask(path: str | Path, size: int | None = None) -> np.ndarray:
    """Decode a mask PNG into a boolean ``H x W`` array (nearest resampling)."""
    try:
        with Image.open(path) as img:
            img = img.convert("L")
            if size is not None and img.size != (size, size):
                img = img.resize((size, size), Image.NEAREST)
            arr = np.asarray(img)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read mask {path}: {exc}") from exc
    return arr > 127


def write_image(path: str | Path, image: np.ndarray) -> None:
    pixels = to_uint8(image)
    if pixels.ndim == 3 and pixels.shape[2] == 1:
        pixels = pixels[:, :, 0]
    Image.fromarray(pixels).save(path)


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255).save(path)


def write_heatmap(path: str | Path, scores: np.ndarray) -> None:
    """Scores in [0, 1] stored as 8-bit grayscale, ``round(score * 255)``."""
    pixels = np.clip(np.rint(np.asarray(scores, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path)


def resize(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of an ``H x W x C`` float image, channel by channel."""
    planes = [
        np.asarray(Image.fromarray(image[:, :, c].astype(np.float32), mode="F").resize((width, height), Image.BILINEAR))
        for c in range(image.shape[2])
    ]
    return np.stack(planes, axis=2).astype(np.float32)
