"""Raster I/O, Lanczos standardization to 300x300, and HSV conversion.

Rasters are float32 arrays of shape (H, W, 3) with values in [0, 1].
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from PIL import Image

SIDE = 300
LANCZOS_A = 3


def read_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() not in (".png", ".ppm"):
        raise ValueError(f"{path}: only PNG and PPM images are supported")
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_image(path: str | Path, image: np.ndarray) -> None:
    path = Path(path)
    fmt = {".png": "PNG", ".ppm": "PPM"}.get(path.suffix.lower())
    if fmt is None:
        raise ValueError(f"{path}: only PNG and PPM images are supported")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image)).save(path, format=fmt)


def lanczos_kernel(x: np.ndarray, a: int = LANCZOS_A) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(np.abs(x) < a, np.sinc(x) * np.sinc(x / a), 0.0)


def lanczos_matrix(n_in: int, n_out: int, a: int = LANCZOS_A) -> np.ndarray:
    """Dense (n_out, n_in) resampling matrix; rows sum to 1.

    The kernel is stretched by the scale factor when downsampling so every
    source pixel contributes (antialiasing).
    """
    scale = n_in / n_out
    stretch = max(scale, 1.0)
    centers = (np.arange(n_out) + 0.5) * scale
    src = np.arange(n_in) + 0.5
    w = lanczos_kernel((src[None, :] - centers[:, None]) / stretch, a)
    return w / w.sum(axis=1, keepdims=True)


def resample(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = image.shape[:2]
    wy = lanczos_matrix(h, out_h)
    wx = lanczos_matrix(w, out_w)
    img = np.asarray(image, dtype=np.float64)
    out = np.einsum("oh,hwc->owc", wy, img)
    out = np.einsum("pw,owc->opc", wx, out)
    return out.astype(np.float32)


def standardize_image(
    image: np.ndarray,
    policy: str = "resample",
    crop_origin: tuple[int, int] = (0, 0),
    boxes: np.ndarray | None = None,
    side: int = SIDE,
):
    """Bring a raster to ``side`` x ``side`` by Lanczos resampling or cropping.

    Returns ``(image, boxes, keep)`` where ``keep`` indexes the input boxes
    that still have positive area after the same mapping and clipping.
    """
    h, w = image.shape[:2]
    boxes = np.zeros((0, 4)) if boxes is None else np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if policy == "resample":
        out = resample(image, side, side)
        sx, sy = side / w, side / h
        mapped = boxes * np.array([sx, sy, sx, sy])
    elif policy == "crop":
        if h < side or w < side:
            raise ValueError(f"crop policy needs a source of at least {side}x{side}, got {w}x{h}")
        x0, y0 = crop_origin
        if x0 < 0 or y0 < 0 or x0 + side > w or y0 + side > h:
            raise ValueError(f"crop window at {crop_origin} does not fit in {w}x{h}")
        out = np.asarray(image[y0 : y0 + side, x0 : x0 + side], dtype=np.float32).copy()
        mapped = boxes - np.array([x0, y0, x0, y0], dtype=np.float64)
    else:
        raise ValueError(f"unknown policy {policy!r}")
    mapped[:, [0, 2]] = np.clip(mapped[:, [0, 2]], 0, side)
    mapped[:, [1, 3]] = np.clip(mapped[:, [1, 3]], 0, side)
    keep = np.flatnonzero((mapped[:, 2] > mapped[:, 0]) & (mapped[:, 3] > mapped[:, 1]))
    return out, mapped[keep], keep


def rgb_hsv(pixels: np.ndarray, direction: str = "to_hsv") -> np.ndarray:
    """Hexcone RGB<->HSV; all channels in [0, 1] with hue in turns."""
    pixels = np.asarray(pixels, dtype=np.float64)
    if direction == "to_hsv":
        return rgb_to_hsv(pixels)
    if direction == "to_rgb":
        return hsv_to_rgb(pixels)
    raise ValueError(f"direction must be 'to_hsv' or 'to_rgb', got {direction!r}")
