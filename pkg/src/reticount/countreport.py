"""Cell counts, reticulocyte percentage, and evaluation against ground truth.

Reticulocyte percentage is ``100 * aggregate / (aggregate + punctate +
erythrocyte)``: only aggregate reticulocytes count as reticulocytes, and all
three detected red-cell classes form the denominator. Quantities that are
undefined (empty denominators) are ``None`` in Python and ``undefined`` in
written reports.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .detgeom import CELL_CLASSES, Detection, iou_matrix

UNDEFINED = "undefined"
CLASS_COLORS = {
    1: (0.85, 0.10, 0.10),
    2: (0.95, 0.60, 0.05),
    3: (0.10, 0.55, 0.15),
}
TRUTH_COLOR = (1.0, 1.0, 1.0)


def _pct(num: float, den: float) -> float | None:
    return 100.0 * num / den if den > 0 else None


def fmt(v: float | None, digits: int = 4) -> str:
    return UNDEFINED if v is None else f"{v:.{digits}f}"


@dataclass(frozen=True)
class ImageCounts:
    image_id: str
    aggregate: int
    punctate: int
    erythrocyte: int

    @property
    def reticulocyte_pct(self) -> float | None:
        return _pct(self.aggregate, self.aggregate + self.punctate + self.erythrocyte)


@dataclass
class CountReport:
    n_aggregate: int = 0
    n_punctate: int = 0
    n_erythrocyte: int = 0
    per_image: list[ImageCounts] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.n_aggregate + self.n_punctate + self.n_erythrocyte

    @property
    def reticulocyte_pct(self) -> float | None:
        return _pct(self.n_aggregate, self.total)

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.n_aggregate, self.n_punctate, self.n_erythrocyte)

    @classmethod
    def from_counts(cls, aggregate: int, punctate: int, erythrocyte: int) -> "CountReport":
        return cls(aggregate, punctate, erythrocyte, [])

    @classmethod
    def from_images(cls, rows: Sequence[ImageCounts]) -> "CountReport":
        rows = list(rows)
        return cls(
            sum(r.aggregate for r in rows),
            sum(r.punctate for r in rows),
            sum(r.erythrocyte for r in rows),
            rows,
        )

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image_id", *CELL_CLASSES, "reticulocyte_pct"])
        for r in self.per_image:
            w.writerow([r.image_id, r.aggregate, r.punctate, r.erythrocyte, fmt(r.reticulocyte_pct)])
        w.writerow(["TOTAL", self.n_aggregate, self.n_punctate, self.n_erythrocyte, fmt(self.reticulocyte_pct)])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [
            f"images analysed:          {len(self.per_image)}",
            f"aggregate reticulocytes:  {self.n_aggregate}",
            f"punctate reticulocytes:   {self.n_punctate}",
            f"erythrocytes:             {self.n_erythrocyte}",
            f"reticulocyte percentage:  {fmt(self.reticulocyte_pct, 2)}" + ("" if self.reticulocyte_pct is None else " %"),
        ]
        return "\n".join(lines) + "\n"


def count_cells(detections: Mapping[str, Sequence[Detection]], conf_threshold: float = 0.5) -> CountReport:
    """Count detections at or above ``conf_threshold`` per class and image."""
    rows = []
    for image_id in sorted(detections):
        c = [0, 0, 0]
        for d in detections[image_id]:
            if d.confidence >= conf_threshold:
                c[d.class_id - 1] += 1
        rows.append(ImageCounts(image_id, *c))
    return CountReport.from_images(rows)


def counts_from_annotations(annotations) -> CountReport:
    return CountReport.from_images(ImageCounts(a.image_id, *a.counts()) for a in annotations)


@dataclass
class CountEvaluation:
    predicted: tuple[int, int, int]
    truth: tuple[int, int, int]
    ratios: dict[str, float | None]
    predicted_pct: float | None
    truth_pct: float | None

    @property
    def pct_delta(self) -> float | None:
        return percentage_delta(self.predicted_pct, self.truth_pct)

    def ratio_pct(self, class_name: str) -> float | None:
        r = self.ratios[class_name]
        return None if r is None else 100.0 * r

    def to_rows(self) -> list[list[str]]:
        rows = []
        for name, p, t in zip(CELL_CLASSES, self.predicted, self.truth):
            rows.append([name, str(t), str(p), fmt(self.ratio_pct(name), 2)])
        return rows


def percentage_delta(predicted_pct: float | None, truth_pct: float | None) -> float | None:
    if predicted_pct is None or truth_pct is None:
        return None
    return predicted_pct - truth_pct


def evaluate_counts(predicted: CountReport, truth: CountReport) -> CountEvaluation:
    """Per-class count ratio predicted/truth and the signed percentage delta."""
    ratios = {
        name: (p / t if t > 0 else None)
        for name, p, t in zip(CELL_CLASSES, predicted.as_tuple(), truth.as_tuple())
    }
    return CountEvaluation(predicted.as_tuple(), truth.as_tuple(), ratios, predicted.reticulocyte_pct, truth.reticulocyte_pct)


@dataclass
class ClassDetectionStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float | None:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else None

    @property
    def recall(self) -> float | None:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else None


@dataclass
class DetectionEvaluation:
    per_class: dict[str, ClassDetectionStats]
    matches: list[tuple[str, int, int]]  # (image_id, prediction index, truth index)


def match_detections(pred: Sequence[Detection], boxes: np.ndarray, labels: np.ndarray, iou_threshold: float = 0.5) -> list[tuple[int, int]]:
    """Greedy one-to-one matching in descending confidence, same class only."""
    order = sorted(range(len(pred)), key=lambda i: (-pred[i].confidence, pred[i].anchor_index, i))
    used = np.zeros(len(boxes), dtype=bool)
    pairs = []
    if len(boxes) == 0:
        return pairs
    pb = np.array([d.box.as_array() for d in pred]).reshape(-1, 4)
    ious = iou_matrix(pb, boxes)
    for i in order:
        cand = np.where((labels == pred[i].class_id) & ~used, ious[i], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            used[j] = True
            pairs.append((i, j))
    return pairs


def evaluate_detections(predicted: Mapping[str, Sequence[Detection]], truth, iou_threshold: float = 0.5) -> DetectionEvaluation:
    """Precision/recall per class; ``truth`` is an iterable of annotations."""
    stats = {name: ClassDetectionStats() for name in CELL_CLASSES}
    matches = []
    for ann in truth:
        pred = list(predicted.get(ann.image_id, ()))
        boxes, labels = ann.boxes(), ann.labels()
        pairs = match_detections(pred, boxes, labels, iou_threshold)
        matched_p = {i for i, _ in pairs}
        matched_t = {j for _, j in pairs}
        for i, j in pairs:
            stats[CELL_CLASSES[labels[j] - 1]].tp += 1
            matches.append((ann.image_id, i, j))
        for i, d in enumerate(pred):
            if i not in matched_p:
                stats[CELL_CLASSES[d.class_id - 1]].fp += 1
        for j, lab in enumerate(labels):
            if j not in matched_t:
                stats[CELL_CLASSES[lab - 1]].fn += 1
    return DetectionEvaluation(stats, matches)


def distractor_false_positives(detections: Sequence[Detection], boxes: np.ndarray, heinz: Sequence[int], iou_threshold: float = 0.5) -> int:
    """Number of Heinz-body cells claimed by an aggregate-reticulocyte detection."""
    agg = np.array([d.box.as_array() for d in detections if d.class_id == 1]).reshape(-1, 4)
    if not len(heinz) or not len(agg):
        return 0
    ious = iou_matrix(np.asarray(boxes)[list(heinz)], agg)
    return int((ious.max(axis=1) >= iou_threshold).sum())


# ---------------------------------------------------------------------------
# overlays
# ---------------------------------------------------------------------------


def _pixel_rect(box, width: int, height: int):
    x0 = int(np.clip(np.floor(box.xmin), 0, width - 1))
    y0 = int(np.clip(np.floor(box.ymin), 0, height - 1))
    x1 = int(np.clip(np.ceil(box.xmax) - 1, 0, width - 1))
    y1 = int(np.clip(np.ceil(box.ymax) - 1, 0, height - 1))
    return x0, y0, max(x0, x1), max(y0, y1)


def rect_outline(box, width: int, height: int, dash: tuple[int, int] | None = None) -> np.ndarray:
    """Boolean mask of a 1-pixel rectangle outline (optionally dashed)."""
    x0, y0, x1, y1 = _pixel_rect(box, width, height)
    mask = np.zeros((height, width), dtype=bool)
    mask[y0, x0 : x1 + 1] = True
    mask[y1, x0 : x1 + 1] = True
    mask[y0 : y1 + 1, x0] = True
    mask[y0 : y1 + 1, x1] = True
    if dash is not None:
        on, off = dash
        yy, xx = np.mgrid[0:height, 0:width]
        mask &= ((xx + yy) % (on + off)) < on
    return mask


def render_overlay(image: np.ndarray, detections: Sequence[Detection], truth=None) -> np.ndarray:
    """Draw detections (solid, per-class color) and optional truth boxes (dashed white).

    ``truth`` is an annotation; confidence captions are left to the matplotlib
    figure in :mod:`reticount.plotting` so the raster stays pixel-exact.
    """
    out = np.array(image, dtype=np.float32, copy=True)
    h, w = out.shape[:2]
    if truth is not None:
        for ob in truth.objects:
            out[rect_outline(ob.box, w, h, dash=(4, 3))] = TRUTH_COLOR
    for d in detections:
        out[rect_outline(d.box, w, h)] = CLASS_COLORS[d.class_id]
    return out
