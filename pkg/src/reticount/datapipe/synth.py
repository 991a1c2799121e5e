"""Synthetic new-methylene-blue smear generator.

Cells are pale discs; reticulocyte classes differ only by their stained
inclusions:

* erythrocyte: plain disc
* punctate reticulocyte: 1-4 small dark dots
* aggregate reticulocyte: 2-3 large irregular dark blobs
* Heinz-body distractor: one blob on the rim, labeled erythrocyte

Ground-truth boxes are the disc bounding squares, so they are exact.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from ..detgeom import Box, iou_matrix
from .imaging import write_image
from .voc import Annotation, LabeledBox, save_annotation

KINDS = ("aggregate", "punctate", "erythrocyte", "heinz")
KIND_LABEL = {
    "aggregate": "aggregate_reticulocyte",
    "punctate": "punctate_reticulocyte",
    "erythrocyte": "erythrocyte",
    "heinz": "erythrocyte",
}
MAX_ATTEMPTS = 10_000


class PlacementError(RuntimeError):
    def __init__(self, placed: int, requested: int):
        super().__init__(f"placed only {placed} of {requested} cells under the overlap cap")
        self.placed = placed
        self.requested = requested


@dataclass(frozen=True)
class SmearSpec:
    side: int = 300
    radius_range: tuple[float, float] = (13.0, 18.0)
    counts: tuple[int, int, int] = (2, 2, 4)
    distractors: int = 0
    background_tint: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (0.84, 0.86, 0.82),
        (0.95, 0.95, 0.92),
    )
    overlap_cap: float = 0.05
    seed: int = 0
    blur: float = 0.6
    noise: float = 0.015
    lighting_gradient: float = 0.0

    def __post_init__(self):
        lo, hi = self.radius_range
        if not 0 < lo <= hi:
            raise ValueError("radius range must be positive and ordered")
        if not 0.0 <= self.overlap_cap < 1.0:
            raise ValueError("overlap cap must lie in [0, 1)")
        if min(self.counts) < 0 or self.distractors < 0:
            raise ValueError("counts must be nonnegative")


SMARTPHONE = dict(blur=1.4, lighting_gradient=0.25, noise=0.025)


@dataclass(frozen=True)
class Cell:
    kind: str
    cx: float
    cy: float
    r: float

    @property
    def box(self) -> Box:
        return Box(self.cx - self.r, self.cy - self.r, self.cx + self.r, self.cy + self.r)


@dataclass
class SmearScene:
    image: np.ndarray
    annotation: Annotation
    cells: list[Cell] = field(default_factory=list)


def _place(spec: SmearSpec, kinds: list[str], rng: np.random.Generator) -> list[Cell]:
    cells: list[Cell] = []
    boxes = np.zeros((0, 4))
    attempts = 0
    lo, hi = spec.radius_range
    for kind in kinds:
        while True:
            if attempts >= MAX_ATTEMPTS:
                raise PlacementError(len(cells), len(kinds))
            attempts += 1
            r = float(rng.uniform(lo, hi))
            cx = float(rng.uniform(r, spec.side - r))
            cy = float(rng.uniform(r, spec.side - r))
            cand = np.array([[cx - r, cy - r, cx + r, cy + r]])
            if len(boxes) == 0 or iou_matrix(cand, boxes).max() <= spec.overlap_cap:
                cells.append(Cell(kind, cx, cy, r))
                boxes = np.vstack([boxes, cand])
                break
    return cells


def _disc(xx, yy, cx, cy, r):
    d = np.hypot(xx - cx, yy - cy)
    return np.clip(r - d + 0.5, 0.0, 1.0), d


def _paint(img, mask, color):
    img *= 1.0 - mask[..., None]
    img += mask[..., None] * np.asarray(color)[None, None, :]


def _render_cell(img, xx, yy, cell: Cell, rng: np.random.Generator):
    # only touch a window around the cell
    pad = int(np.ceil(cell.r + 6))
    x0, x1 = max(0, int(cell.cx) - pad), min(img.shape[1], int(cell.cx) + pad + 1)
    y0, y1 = max(0, int(cell.cy) - pad), min(img.shape[0], int(cell.cy) + pad + 1)
    sub = img[y0:y1, x0:x1]
    sx, sy = xx[y0:y1, x0:x1], yy[y0:y1, x0:x1]
    body = np.array([0.64, 0.76, 0.76]) + rng.uniform(-0.04, 0.04, size=3)
    mask, d = _disc(sx, sy, cell.cx, cell.cy, cell.r)
    shade = np.clip(1.0 - 0.12 * np.clip((d / cell.r - 0.7) / 0.3, 0, 1) + 0.06 * np.clip(1 - d / (0.45 * cell.r), 0, 1), 0, 1.2)
    color = body[None, None, :] * shade[..., None]
    sub *= 1.0 - mask[..., None]
    sub += mask[..., None] * color
    stain = np.array([0.16, 0.26, 0.55]) + rng.uniform(-0.03, 0.03, size=3)
    if cell.kind == "punctate":
        for _ in range(int(rng.integers(1, 5))):
            rr = cell.r * 0.7 * np.sqrt(rng.random())
            th = rng.uniform(0, 2 * np.pi)
            m, _ = _disc(sx, sy, cell.cx + rr * np.cos(th), cell.cy + rr * np.sin(th), rng.uniform(1.2, 2.0))
            _paint(sub, m * mask, stain)
    elif cell.kind == "aggregate":
        for _ in range(int(rng.integers(2, 4))):
            rr = cell.r * 0.5 * np.sqrt(rng.random())
            th = rng.uniform(0, 2 * np.pi)
            bx, by = cell.cx + rr * np.cos(th), cell.cy + rr * np.sin(th)
            for _ in range(int(rng.integers(3, 6))):
                m, _ = _disc(sx, sy, bx + rng.normal(0, 2.0), by + rng.normal(0, 2.0), rng.uniform(2.2, 3.5))
                _paint(sub, m * mask, stain)
    elif cell.kind == "heinz":
        th = rng.uniform(0, 2 * np.pi)
        rr = cell.r * rng.uniform(0.9, 1.02)
        m, _ = _disc(sx, sy, cell.cx + rr * np.cos(th), cell.cy + rr * np.sin(th), rng.uniform(2.5, 3.5))
        _paint(sub, m, np.array([0.30, 0.42, 0.62]) + rng.uniform(-0.03, 0.03, size=3))


def render_smear(spec: SmearSpec, rng: np.random.Generator | None = None, image_id: str = "smear.png") -> SmearScene:
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    a, p, e = spec.counts
    kinds = ["aggregate"] * a + ["punctate"] * p + ["erythrocyte"] * e + ["heinz"] * spec.distractors
    rng.shuffle(kinds)
    cells = _place(spec, kinds, rng)

    side = spec.side
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64) + 0.5
    lo, hi = (np.asarray(t) for t in spec.background_tint)
    tint = lo + rng.random(3) * (hi - lo)
    img = np.broadcast_to(tint, (side, side, 3)).copy()
    for cell in cells:
        _render_cell(img, xx, yy, cell, rng)
    if spec.blur > 0:
        img = gaussian_filter(img, sigma=(spec.blur, spec.blur, 0))
    if spec.lighting_gradient > 0:
        th = rng.uniform(0, 2 * np.pi)
        ramp = ((xx - side / 2) * np.cos(th) + (yy - side / 2) * np.sin(th)) / side
        img *= (1.0 + spec.lighting_gradient * ramp)[..., None]
    if spec.noise > 0:
        img += rng.normal(0, spec.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)

    objects = tuple(LabeledBox(KIND_LABEL[c.kind], c.box) for c in cells)
    return SmearScene(img, Annotation(image_id, side, side, objects), cells)


def generate_synthetic_smear(spec: SmearSpec, rng: np.random.Generator | None = None):
    scene = render_smear(spec, rng)
    return scene.image, scene.annotation


# ---------------------------------------------------------------------------
# whole datasets
# ---------------------------------------------------------------------------


def _split_by_ratio(total: int, weights) -> list[int]:
    """Largest-remainder apportionment of ``total`` by ``weights``."""
    w = np.asarray(weights, dtype=np.float64)
    raw = total * w / w.sum()
    base = np.floor(raw).astype(int)
    order = np.argsort(-(raw - base), kind="stable")
    for i in order[: total - base.sum()]:
        base[i] += 1
    return base.tolist()


def plan_counts(
    n_images: int,
    rng: np.random.Generator,
    ratio=(1, 1, 2),
    cells_range=(6, 10),
    heinz_frac: float = 0.1,
    aggregate_total: int | None = None,
) -> list[tuple[int, int, int, int]]:
    """Per-image (aggregate, punctate, plain erythrocyte, heinz) counts.

    The dataset-wide class totals follow ``ratio`` exactly (up to rounding);
    ``aggregate_total`` pins the aggregate count instead. Heinz distractors
    are taken from the erythrocyte share, as a fraction of all cells.
    """
    lo, hi = cells_range
    sizes = rng.integers(lo, hi + 1, size=n_images)
    total = int(sizes.sum())
    if aggregate_total is not None:
        if aggregate_total > total:
            raise ValueError(f"cannot fit {aggregate_total} aggregates into {total} cells")
        n_p, n_e = _split_by_ratio(total - aggregate_total, ratio[1:])
        n_a = aggregate_total
    else:
        n_a, n_p, n_e = _split_by_ratio(total, ratio)
    n_h = min(int(round(heinz_frac * total)), n_e)
    labels = np.array([0] * n_a + [1] * n_p + [2] * (n_e - n_h) + [3] * n_h)
    rng.shuffle(labels)
    out = []
    start = 0
    for s in sizes:
        chunk = labels[start : start + s]
        start += s
        out.append(tuple(int((chunk == k).sum()) for k in range(4)))
    return out


def synthesize_dataset(
    out_dir: str | Path,
    n_images: int,
    seed: int,
    ratio=(1, 1, 2),
    cells_range=(6, 10),
    heinz_frac: float = 0.1,
    aggregate_total: int | None = None,
    preset: str = "microscope",
    prefix: str = "smear",
) -> dict:
    """Write ``images/``, ``annotations/`` and ``manifest.json`` under ``out_dir``."""
    if n_images < 1:
        raise ValueError("n_images must be at least 1")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    plan = plan_counts(n_images, np.random.default_rng([seed, 0]), ratio, cells_range, heinz_frac, aggregate_total)
    extra = SMARTPHONE if preset == "smartphone" else {}
    if preset not in ("microscope", "smartphone"):
        raise ValueError(f"unknown preset {preset!r}")
    entries = []
    for i, (a, p, e, h) in enumerate(plan):
        image_id = f"{prefix}_{i:04d}.png"
        spec = SmearSpec(counts=(a, p, e), distractors=h, seed=seed, **extra)
        scene = render_smear(spec, np.random.default_rng([seed, 1, i]), image_id)
        write_image(out / "images" / image_id, scene.image)
        save_annotation(out / "annotations" / f"{prefix}_{i:04d}.xml", scene.annotation)
        entries.append(
            {
                "image": image_id,
                "seed": [seed, 1, i],
                "counts": list(scene.annotation.counts()),
                "heinz": [k for k, c in enumerate(scene.cells) if c.kind == "heinz"],
            }
        )
    totals = np.sum([en["counts"] for en in entries], axis=0).tolist()
    manifest = {
        "seed": seed,
        "n_images": n_images,
        "ratio": list(ratio),
        "cells_range": list(cells_range),
        "heinz_frac": heinz_frac,
        "aggregate_total": aggregate_total,
        "preset": preset,
        "spec": {k: v for k, v in asdict(SmearSpec(**extra)).items() if k not in ("counts", "distractors", "seed")},
        "totals": dict(zip(("aggregate_reticulocyte", "punctate_reticulocyte", "erythrocyte"), totals)),
        "images": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest
