"""PNG read/write for float images in [0, 1]."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, image: np.ndarray) -> None:
    """Write an (H, W, 3) float image as 8-bit RGB."""
    Image.fromarray(to_uint8(image)).save(Path(path), format="PNG")


def save_alpha_png16(path, alpha: np.ndarray) -> None:
    """Write an (H, W) float alpha map as 16-bit grayscale."""
    a = np.round(np.clip(np.asarray(alpha, dtype=np.float64), 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(a).save(Path(path), format="PNG")


def load_png(path) -> np.ndarray:
    """Read an image as float64 in [0, 1]; 16-bit grayscale maps to (H, W)."""
    with Image.open(Path(path)) as im:
        if im.mode in ("I;16", "I;16B", "I"):
            return np.asarray(im, dtype=np.float64) / 65535.0
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def load_png_uint8(path) -> np.ndarray:
    with Image.open(Path(path)) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)
