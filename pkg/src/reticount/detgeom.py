"""Box geometry for the single-shot detector.

Boxes are half-open real rectangles ``(xmin, ymin, xmax, ymax)`` in pixels;
area is ``(xmax - xmin) * (ymax - ymin)`` with no +1 convention. Arrays of
boxes have shape ``(n, 4)`` in that corner order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

CLASS_NAMES = ("background", "aggregate_reticulocyte", "punctate_reticulocyte", "erythrocyte")
CELL_CLASSES = CLASS_NAMES[1:]
VARIANCES = (0.1, 0.2)
MATCH_THRESHOLD = 0.5
NMS_IOU = 0.45
CROSS_CLASS_IOU = 0.45
TOP_K = 400


@dataclass(frozen=True)
class Box:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if self.xmin > self.xmax or self.ymin > self.ymax:
            raise ValueError(f"invalid box {self}")

    @property
    def area(self) -> float:
        return (self.xmax - self.xmin) * (self.ymax - self.ymin)

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.xmin + self.xmax), 0.5 * (self.ymin + self.ymax))

    def as_array(self) -> np.ndarray:
        return np.array([self.xmin, self.ymin, self.xmax, self.ymax], dtype=np.float64)

    @classmethod
    def from_array(cls, a) -> "Box":
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))

    def clipped(self, width: float, height: float) -> "Box":
        return Box(
            min(max(self.xmin, 0.0), width),
            min(max(self.ymin, 0.0), height),
            min(max(self.xmax, 0.0), width),
            min(max(self.ymax, 0.0), height),
        )


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    confidence: float
    anchor_index: int = -1

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError("detections never carry the background class")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id]


@dataclass(frozen=True)
class FeatureMapSpec:
    grid: int
    scale: float
    ratios: tuple[float, ...]


@dataclass(frozen=True)
class AnchorSpec:
    maps: tuple[FeatureMapSpec, ...]

    def __post_init__(self):
        scales = [m.scale for m in self.maps]
        if any(b <= a for a, b in zip(scales, scales[1:])):
            raise ValueError("anchor scales must be strictly increasing across maps")
        for m in self.maps:
            if m.grid < 1 or m.scale <= 0 or not m.ratios or min(m.ratios) <= 0:
                raise ValueError(f"invalid feature map spec {m}")

    @property
    def total(self) -> int:
        return sum(m.grid * m.grid * len(m.ratios) for m in self.maps)

    def to_dict(self) -> dict:
        return {"maps": [{"grid": m.grid, "scale": m.scale, "ratios": list(m.ratios)} for m in self.maps]}

    @classmethod
    def from_dict(cls, d: dict) -> "AnchorSpec":
        return cls(tuple(FeatureMapSpec(int(m["grid"]), float(m["scale"]), tuple(float(r) for r in m["ratios"])) for m in d["maps"]))


# Sized for cells of 12-40 px in a 300 px frame: every cell size gets several
# anchors at IoU >= 0.5, which the coarser 18/9/5 grids did not manage.
DEFAULT_RATIOS = (1.0, 2.0, 0.5)
DEFAULT_ANCHORS = AnchorSpec(
    (
        FeatureMapSpec(37, 0.10, DEFAULT_RATIOS),
        FeatureMapSpec(18, 0.15, DEFAULT_RATIOS),
        FeatureMapSpec(9, 0.25, DEFAULT_RATIOS),
    )
)


# ---------------------------------------------------------------------------
# conversions and IoU
# ---------------------------------------------------------------------------


def to_center(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return np.stack([boxes[..., 0] + 0.5 * w, boxes[..., 1] + 0.5 * h, w, h], axis=-1)


def to_corners(cs: np.ndarray) -> np.ndarray:
    cs = np.asarray(cs, dtype=np.float64)
    hw = 0.5 * cs[..., 2]
    hh = 0.5 * cs[..., 3]
    return np.stack([cs[..., 0] - hw, cs[..., 1] - hh, cs[..., 0] + hw, cs[..., 1] + hh], axis=-1)


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    out = np.array(boxes, dtype=np.float64)
    out[..., [0, 2]] = np.clip(out[..., [0, 2]], 0.0, width)
    out[..., [1, 3]] = np.clip(out[..., [1, 3]], 0.0, height)
    return out


def box_areas(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.maximum(boxes[..., 2] - boxes[..., 0], 0) * np.maximum(boxes[..., 3] - boxes[..., 1], 0)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU, shape ``(len(a), len(b))``; 0 where the union is empty."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.maximum(ix, 0) * np.maximum(iy, 0)
    union = box_areas(a)[:, None] + box_areas(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    return out


def iou(a: Box, b: Box) -> float:
    return float(iou_matrix(a.as_array(), b.as_array())[0, 0])


# ---------------------------------------------------------------------------
# anchors and offsets
# ---------------------------------------------------------------------------


def generate_anchors(spec: AnchorSpec = DEFAULT_ANCHORS, image_side: int = 300) -> np.ndarray:
    """Corner-form anchors ordered (map, row, column, ratio), clipped to the image."""
    chunks = []
    for fm in spec.maps:
        m = fm.grid
        centers = (np.arange(m) + 0.5) / m * image_side
        cy, cx = np.meshgrid(centers, centers, indexing="ij")
        r = np.asarray(fm.ratios, dtype=np.float64)
        w = fm.scale * np.sqrt(r) * image_side
        h = fm.scale / np.sqrt(r) * image_side
        cs = np.empty((m, m, len(r), 4))
        cs[..., 0] = cx[..., None]
        cs[..., 1] = cy[..., None]
        cs[..., 2] = w
        cs[..., 3] = h
        chunks.append(cs.reshape(-1, 4))
    return clip_boxes(to_corners(np.concatenate(chunks)), image_side, image_side)


def encode(gt: np.ndarray, anchors: np.ndarray, variances=VARIANCES) -> np.ndarray:
    """Offsets of corner boxes ``gt`` relative to ``anchors`` (broadcasting)."""
    g = to_center(gt)
    a = to_center(anchors)
    if np.any(a[..., 2:] <= 0):
        raise ValueError("anchors must have positive width and height")
    if np.any(g[..., 2:] <= 0):
        raise ValueError("ground-truth boxes must have positive width and height")
    vc, vs = variances
    return np.stack(
        [
            (g[..., 0] - a[..., 0]) / (a[..., 2] * vc),
            (g[..., 1] - a[..., 1]) / (a[..., 3] * vc),
            np.log(g[..., 2] / a[..., 2]) / vs,
            np.log(g[..., 3] / a[..., 3]) / vs,
        ],
        axis=-1,
    )


def decode(offsets: np.ndarray, anchors: np.ndarray, variances=VARIANCES, image_side: float | None = None) -> np.ndarray:
    """Inverse of :func:`encode`; clips to ``[0, image_side]`` when given."""
    off = np.asarray(offsets, dtype=np.float64)
    a = to_center(anchors)
    vc, vs = variances
    # cap the exponent so wild offsets degrade to huge (then clipped) boxes, not inf
    ew = np.exp(np.minimum(off[..., 2] * vs, 50.0))
    eh = np.exp(np.minimum(off[..., 3] * vs, 50.0))
    cs = np.stack(
        [
            a[..., 0] + off[..., 0] * vc * a[..., 2],
            a[..., 1] + off[..., 1] * vc * a[..., 3],
            a[..., 2] * ew,
            a[..., 3] * eh,
        ],
        axis=-1,
    )
    boxes = to_corners(cs)
    if image_side is not None:
        boxes = clip_boxes(boxes, image_side, image_side)
    return boxes


# ---------------------------------------------------------------------------
# matching
# ---------------------------------------------------------------------------


def match_anchors(
    gt_boxes: np.ndarray,
    gt_labels: Sequence[int],
    anchors: np.ndarray,
    threshold: float = MATCH_THRESHOLD,
) -> tuple[np.ndarray, np.ndarray]:
    """Two-stage matching of ground truth to anchors.

    Returns ``(labels, gt_index)`` per anchor; label 0 and index -1 mark
    background. Stage one greedily pairs each ground truth with its best
    free anchor (global IoU order); stage two assigns any remaining anchor
    whose best IoU reaches ``threshold``.
    """
    n_anchors = len(anchors)
    labels = np.zeros(n_anchors, dtype=np.int64)
    index = np.full(n_anchors, -1, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0:
        return labels, index
    gt_labels = np.asarray(gt_labels, dtype=np.int64)
    ious = iou_matrix(gt_boxes, anchors)

    work = ious.copy()
    for _ in range(len(gt_boxes)):
        flat = int(np.argmax(work))
        g, a = divmod(flat, n_anchors)
        if work[g, a] <= 0:
            break
        index[a] = g
        work[g, :] = -1.0
        work[:, a] = -1.0

    free = index < 0
    best_gt = ious.argmax(axis=0)
    best_iou = ious.max(axis=0)
    take = free & (best_iou >= threshold)
    index[take] = best_gt[take]
    matched = index >= 0
    labels[matched] = gt_labels[index[matched]]
    return labels, index


# ---------------------------------------------------------------------------
# non-maximum suppression
# ---------------------------------------------------------------------------


def _rank_key(d: Detection):
    return (-d.confidence, d.anchor_index)


def nms(dets: Iterable[Detection], iou_threshold: float = NMS_IOU, top_k: int = TOP_K) -> list[Detection]:
    """Per-class greedy suppression, then global top-k by confidence."""
    dets = [d for d in dets if d.box.area > 0]
    kept: list[Detection] = []
    for cls in sorted({d.class_id for d in dets}):
        group = sorted((d for d in dets if d.class_id == cls), key=_rank_key)
        boxes = np.array([d.box.as_array() for d in group])
        alive = np.ones(len(group), dtype=bool)
        ious = iou_matrix(boxes, boxes)
        for i in range(len(group)):
            if not alive[i]:
                continue
            kept.append(group[i])
            alive[i + 1 :] &= ious[i, i + 1 :] <= iou_threshold
    kept.sort(key=_rank_key)
    return kept[:top_k]


def suppress_cross_class(dets: Iterable[Detection], iou_threshold: float = CROSS_CLASS_IOU) -> list[Detection]:
    """One label per cell: drop a detection overlapping a more confident one of another class.

    Run after :func:`nms`. Per-class NMS alone lets a cell the classifier is
    unsure about be counted once for each class it votes for. A threshold of
    1 or more disables the pass.
    """
    ranked = sorted(dets, key=_rank_key)
    if iou_threshold >= 1 or len(ranked) < 2:
        return ranked
    ious = iou_matrix(np.array([d.box.as_array() for d in ranked]), np.array([d.box.as_array() for d in ranked]))
    alive = np.ones(len(ranked), dtype=bool)
    for i, d in enumerate(ranked):
        if alive[i]:
            other = np.array([e.class_id != d.class_id for e in ranked[i + 1 :]], dtype=bool)
            alive[i + 1 :] &= ~(other & (ious[i, i + 1 :] > iou_threshold))
    return [d for d, a in zip(ranked, alive) if a]


# ---------------------------------------------------------------------------
# text serialization
# ---------------------------------------------------------------------------


def format_detection(image_id: str, d: Detection) -> str:
    b = d.box
    return f"{image_id} {d.class_name} {d.confidence:.4f} {b.xmin:.4f} {b.ymin:.4f} {b.xmax:.4f} {b.ymax:.4f}"


def parse_detection_line(line: str) -> tuple[str, Detection]:
    parts = line.split()
    if len(parts) != 7:
        raise ValueError(f"expected 7 fields, got {len(parts)}: {line!r}")
    image_id, name = parts[0], parts[1]
    if name not in CELL_CLASSES:
        raise ValueError(f"unknown class name {name!r}")
    conf, x0, y0, x1, y1 = map(float, parts[2:])
    return image_id, Detection(Box(x0, y0, x1, y1), CLASS_NAMES.index(name), conf)


def write_detections(path, per_image: dict[str, list[Detection]]) -> None:
    with open(path, "w") as fh:
        for image_id in sorted(per_image):
            for d in per_image[image_id]:
                fh.write(format_detection(image_id, d) + "\n")


def read_detections(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                image_id, d = parse_detection_line(line)
                out.setdefault(image_id, []).append(d)
    return out
