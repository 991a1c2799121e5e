from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, TypeVar

import numpy as np

from .imaging import SIDE, read_image, standardize_image
from .voc import Annotation, AnnotationError, read_annotation

T = TypeVar("T")


@dataclass
class Sample:
    """One standardized training/evaluation image with its ground truth."""

    image_id: str
    image: np.ndarray  # (300, 300, 3) float32 in [0, 1]
    boxes: np.ndarray  # (n, 4) corner form
    labels: np.ndarray  # (n,) class ids 1..3
    heinz: tuple[int, ...] = ()

    @classmethod
    def from_annotation(cls, image: np.ndarray, ann: Annotation, heinz=()) -> "Sample":
        boxes, labels = ann.boxes(), ann.labels()
        if image.shape[:2] != (SIDE, SIDE):
            image, boxes, keep = standardize_image(image, "resample", boxes=boxes)
            labels = labels[keep]
        return cls(ann.image_id, np.asarray(image, dtype=np.float32), boxes, labels, tuple(heinz))

    def counts(self) -> tuple[int, int, int]:
        return tuple(int((self.labels == k).sum()) for k in (1, 2, 3))


def split_dataset(items: Sequence[T], train_fraction: float, seed: int) -> tuple[list[T], list[T]]:
    """Seeded shuffle then prefix split; ``floor(n * f)`` clamped to keep both sides nonempty."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    n = len(items)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(np.floor(n * train_fraction))
    if n >= 2:
        n_train = min(max(n_train, 1), n - 1)
    train = [items[i] for i in order[:n_train]]
    val = [items[i] for i in order[n_train:]]
    return train, val


def annotation_files(root: str | Path) -> list[Path]:
    root = Path(root)
    ann_dir = root / "annotations"
    if not ann_dir.is_dir():
        raise AnnotationError(f"{root}: no annotations/ directory")
    return sorted(ann_dir.glob("*.xml"))


def load_annotations(root: str | Path) -> list[Annotation]:
    """Parse every annotation under ``root/annotations`` (fails on the first bad file)."""
    return [read_annotation(p) for p in annotation_files(root)]


def load_dataset(root: str | Path) -> list[Sample]:
    root = Path(root)
    anns = load_annotations(root)
    heinz = {}
    manifest = root / "manifest.json"
    if manifest.exists():
        heinz = {e["image"]: e.get("heinz", []) for e in json.loads(manifest.read_text())["images"]}
    samples = []
    for ann in anns:
        img_path = root / "images" / ann.image_id
        if not img_path.exists():
            raise AnnotationError(f"{img_path}: image referenced by annotation is missing")
        samples.append(Sample.from_annotation(read_image(img_path), ann, heinz.get(ann.image_id, ())))
    return samples


def list_images(root: str | Path) -> list[Path]:
    root = Path(root)
    return sorted(p for p in root.iterdir() if p.suffix.lower() in (".png", ".ppm"))
