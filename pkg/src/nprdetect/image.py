"""Image containers and PNG/JPEG I/O.

Images are plain ``numpy`` arrays of shape ``(height, width, channels)``,
dtype float32, values in ``[0, 1]``.
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


class ImageDecodeError(IOError):
    """Raised when a file cannot be decoded as an image."""


def as_image(data, *, check_range: bool = True) -> np.ndarray:
    """Validate and coerce ``data`` into an ``(H, W, C)`` float32 image.

    2-D input is promoted to a single channel.
    """
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected an (H, W, C) image, got shape {arr.shape}")
    h, w, c = arr.shape
    if h == 0 or w == 0:
        raise ValueError("image is empty")
    if c not in (1, 3):
        raise ValueError(f"images must have 1 or 3 channels, got {c}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    if check_range and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")
    return arr


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def read_image(path) -> np.ndarray:
    """Decode a PNG/JPEG file into an ``(H, W, C)`` float32 image in [0, 1].

    Grayscale files come back with one channel, everything else as RGB.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            if path.suffix.lower() in (".jpg", ".jpeg"):
                logger.warning("%s: JPEG input attenuates up-sampling traces", path)
            if im.mode in ("L", "I;16", "I", "F", "1"):
                arr = np.asarray(im.convert("L"), dtype=np.uint8)
            else:
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode {path}: {exc}") from exc
    return as_image(arr.astype(np.float32) / np.float32(255.0))


def write_png(path, image: np.ndarray) -> None:
    """Write a [0, 1] image as an 8-bit PNG (grayscale for one channel).

    Output bytes depend only on the pixel values, so reruns are byte-identical.
    """
    arr = to_uint8(image)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(arr)).save(path, format="PNG", optimize=False, compress_level=6)
