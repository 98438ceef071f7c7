"""PNG readers/writers for image/mask pairs.

Images are 8-bit RGB; masks are single-channel 8-bit with nonzero meaning
foreground (written as 0/255 for visibility, loaded back to {0, 1}).
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def load_image(path: str | Path) -> np.ndarray:
    """Load an RGB image as a HxWx3 uint8 array."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image(image: np.ndarray, path: str | Path) -> None:
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {image.shape}")
    Image.fromarray(image, mode="RGB").save(path)


def load_mask(path: str | Path) -> np.ndarray:
    """Load a mask PNG as a HxW uint8 array with values in {0, 1}."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return (arr > 0).astype(np.uint8)


def save_mask(mask: np.ndarray, path: str | Path) -> None:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected HxW mask, got shape {mask.shape}")
    Image.fromarray(((mask > 0) * 255).astype(np.uint8), mode="L").save(path)
