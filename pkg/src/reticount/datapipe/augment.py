"""Training-time photometric and geometric augmentation.

Four transforms run in a fixed order (flip, translate, scale, brightness),
each gated by its own fair coin. Boxes follow the geometric transforms; a
box is dropped as soon as its center leaves the image, otherwise clipped.
The center tested is that of the transformed, unclipped box, so clipping
at one step never drags a box that left the frame back inside at the next.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import affine_transform

from .imaging import rgb_hsv

P_FLIP = 0.5
P_TRANSLATE = 0.5
P_SCALE = 0.5
P_BRIGHTNESS = 0.5
MAX_SHIFT = 50
SCALE_RANGE = (0.5, 1.5)
BRIGHTNESS_RANGE = (0.5, 2.0)
FILL = 0.0


@dataclass(frozen=True)
class AugmentParams:
    flip: bool = False
    shift: tuple[int, int] | None = None
    scale: float | None = None
    brightness: float | None = None


def sample_augment_params(rng: np.random.Generator) -> AugmentParams:
    flip = bool(rng.random() < P_FLIP)
    shift = None
    if rng.random() < P_TRANSLATE:
        dx, dy = rng.integers(-MAX_SHIFT, MAX_SHIFT + 1, size=2)
        shift = (int(dx), int(dy))
    scale = float(rng.uniform(*SCALE_RANGE)) if rng.random() < P_SCALE else None
    brightness = float(rng.uniform(*BRIGHTNESS_RANGE)) if rng.random() < P_BRIGHTNESS else None
    return AugmentParams(flip, shift, scale, brightness)


def _survivors(centers: np.ndarray, w: int, h: int) -> np.ndarray:
    cx, cy = centers[:, 0], centers[:, 1]
    return (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)


def _clip(boxes: np.ndarray, w: int, h: int) -> np.ndarray:
    boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, w)
    boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, h)
    return boxes


def map_points(points: np.ndarray, params: AugmentParams, width: int, height: int) -> np.ndarray:
    """Apply the geometric part of ``params`` to (x, y) points."""
    pts = np.array(points, dtype=np.float64).reshape(-1, 2)
    if params.flip:
        pts[:, 0] = width - pts[:, 0]
    if params.shift is not None:
        pts += np.asarray(params.shift, dtype=np.float64)
    if params.scale is not None:
        c = np.array([width / 2.0, height / 2.0])
        pts = (pts - c) * params.scale + c
    return pts


def _shift_image(image: np.ndarray, dx: int, dy: int) -> np.ndarray:
    h, w = image.shape[:2]
    out = np.full_like(image, FILL)
    src_x0, src_x1 = max(0, -dx), min(w, w - dx)
    src_y0, src_y1 = max(0, -dy), min(h, h - dy)
    if src_x1 > src_x0 and src_y1 > src_y0:
        out[src_y0 + dy : src_y1 + dy, src_x0 + dx : src_x1 + dx] = image[src_y0:src_y1, src_x0:src_x1]
    return out


def _scale_image(image: np.ndarray, f: float) -> np.ndarray:
    h, w = image.shape[:2]
    cy, cx = h / 2.0, w / 2.0
    # output index o samples input index o/f + (0.5 - c)/f + c - 0.5 (pixel-center convention)
    matrix = np.array([1.0 / f, 1.0 / f, 1.0])
    offset = np.array([(0.5 - cy) / f + cy - 0.5, (0.5 - cx) / f + cx - 0.5, 0.0])
    out = affine_transform(image, np.diag(matrix), offset=offset, order=1, mode="grid-constant", cval=FILL)
    return out.astype(image.dtype, copy=False)


def _brightness(image: np.ndarray, factor: float) -> np.ndarray:
    hsv = rgb_hsv(np.clip(image, 0.0, 1.0), "to_hsv")
    hsv[..., 2] = np.clip(hsv[..., 2] * factor, 0.0, 1.0)
    return rgb_hsv(hsv, "to_rgb").astype(image.dtype)


def apply_augment(image: np.ndarray, boxes: np.ndarray, params: AugmentParams):
    """Returns ``(image, boxes, keep)``; ``keep`` indexes surviving input boxes."""
    h, w = image.shape[:2]
    img = image
    bx = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    keep = np.arange(len(bx))
    centers = 0.5 * (bx[:, :2] + bx[:, 2:])
    if params.flip:
        img = img[:, ::-1]
        bx = np.stack([w - bx[:, 2], bx[:, 1], w - bx[:, 0], bx[:, 3]], axis=1)
        centers[:, 0] = w - centers[:, 0]
    if params.shift is not None:
        dx, dy = params.shift
        img = _shift_image(img, dx, dy)
        bx = bx + np.array([dx, dy, dx, dy], dtype=np.float64)
        centers = centers + np.array([dx, dy], dtype=np.float64)
        alive = _survivors(centers, w, h)
        bx, centers, keep = _clip(bx[alive], w, h), centers[alive], keep[alive]
    if params.scale is not None:
        f = params.scale
        img = _scale_image(np.ascontiguousarray(img), f)
        c = np.array([w / 2.0, h / 2.0])
        bx = (bx - np.tile(c, 2)) * f + np.tile(c, 2)
        centers = (centers - c) * f + c
        alive = _survivors(centers, w, h)
        bx, centers, keep = _clip(bx[alive], w, h), centers[alive], keep[alive]
    if params.brightness is not None:
        img = _brightness(img, params.brightness)
    return np.ascontiguousarray(img, dtype=image.dtype), bx, keep


def augment(image: np.ndarray, boxes: np.ndarray, rng: np.random.Generator):
    return apply_augment(image, boxes, sample_augment_params(rng))
