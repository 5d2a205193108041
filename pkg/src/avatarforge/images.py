"""Image conventions and pixel-level helpers.

Images are numpy float64 arrays with values in [0, 1]: shape (H, W) for
grayscale, (H, W, 3) for RGB. On disk they are 8-bit PNG. All modules share
this convention.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image as PILImage


def validate_image(img: np.ndarray, name: str = "image") -> np.ndarray:
    """Check shape and [0, 1] range, returning the array unchanged."""
    arr = np.asarray(img)
    if arr.ndim == 2:
        pass
    elif arr.ndim == 3 and arr.shape[2] in (1, 3, 4):
        pass
    else:
        raise ValueError(f"{name}: expected (H, W) or (H, W, c) with c in 1/3/4, got {arr.shape}")
    if arr.shape[0] <= 0 or arr.shape[1] <= 0:
        raise ValueError(f"{name}: empty image {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError(f"{name}: non-finite pixel values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"{name}: pixel values outside [0, 1] ({arr.min():.4g}..{arr.max():.4g})")
    return arr


def load_image(path: str | Path, grayscale: bool = False) -> np.ndarray:
    """Load an 8-bit PNG into a float64 [0, 1] array."""
    with PILImage.open(path) as im:
        im = im.convert("L" if grayscale else "RGB")
        arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


def save_image(img: np.ndarray, path: str | Path) -> None:
    """Write a [0, 1] float array as 8-bit PNG (grayscale or RGB)."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    data = np.rint(arr * 255.0).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(data, mode=mode).save(path, format="PNG")


def to_gray(img: np.ndarray) -> np.ndarray:
    """Rec. 601 luma of an RGB image; grayscale passes through."""
    if img.ndim == 2:
        return img
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def masked(image: np.ndarray, mask: np.ndarray, background: float | tuple | np.ndarray = 1.0) -> np.ndarray:
    """Composite image over a background color: mask*image + (1-mask)*background.

    The mask is single-channel and must match the image size. Works for
    grayscale and RGB images; background may be a scalar or per-channel color.
    """
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim == 3 and mask.shape[2] == 1:
        mask = mask[..., 0]
    if mask.ndim != 2:
        raise ValueError(f"mask must be single-channel, got shape {mask.shape}")
    if mask.shape != image.shape[:2]:
        raise ValueError(f"size mismatch: image {image.shape[:2]} vs mask {mask.shape}")
    bg = np.asarray(background, dtype=np.float64)
    if image.ndim == 3:
        mask = mask[..., None]
        bg = np.broadcast_to(bg, (image.shape[2],))
    return mask * image + (1.0 - mask) * bg


def box_downscale(img: np.ndarray, factor: int = 2) -> np.ndarray:
    """Area-average downscale by an integer factor; odd trailing rows/cols
    are handled by edge replication."""
    arr = np.asarray(img, dtype=np.float64)
    h, w = arr.shape[:2]
    ph = (-h) % factor
    pw = (-w) % factor
    if ph or pw:
        pad = [(0, ph), (0, pw)] + [(0, 0)] * (arr.ndim - 2)
        arr = np.pad(arr, pad, mode="edge")
    h2, w2 = arr.shape[0] // factor, arr.shape[1] // factor
    shape = (h2, factor, w2, factor) + arr.shape[2:]
    return arr.reshape(shape).mean(axis=(1, 3))


def bilinear_sample(img: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Sample an image at real-valued (x, y) pixel coordinates.

    coords has shape (..., 2) ordered (x, y); coordinates are clamped to the
    image bounds. Returns samples with the image's channel layout.
    """
    arr = np.asarray(img, dtype=np.float64)
    h, w = arr.shape[:2]
    x = np.clip(coords[..., 0], 0.0, w - 1.0)
    y = np.clip(coords[..., 1], 0.0, h - 1.0)
    x0 = np.clip(np.floor(x).astype(np.intp), 0, w - 2) if w > 1 else np.zeros_like(x, dtype=np.intp)
    y0 = np.clip(np.floor(y).astype(np.intp), 0, h - 2) if h > 1 else np.zeros_like(y, dtype=np.intp)
    fx = x - x0
    fy = y - y0
    if arr.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    v00 = arr[y0, x0]
    v01 = arr[y0, x1]
    v10 = arr[y1, x0]
    v11 = arr[y1, x1]
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy
