"""VOC-style XML annotations (the labelImg on-disk format)."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..detgeom import CELL_CLASSES, CLASS_NAMES, Box


class AnnotationError(ValueError):
    """Malformed or semantically invalid annotation document."""


@dataclass(frozen=True)
class LabeledBox:
    name: str
    box: Box

    @property
    def class_id(self) -> int:
        return CLASS_NAMES.index(self.name)


@dataclass(frozen=True)
class Annotation:
    image_id: str
    width: int
    height: int
    objects: tuple[LabeledBox, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise AnnotationError(f"{self.image_id}: image size must be positive")
        for ob in self.objects:
            if ob.name not in CELL_CLASSES:
                raise AnnotationError(f"{self.image_id}: unknown class {ob.name!r}")
            b = ob.box
            if b.xmin < 0 or b.ymin < 0 or b.xmax > self.width or b.ymax > self.height:
                raise AnnotationError(f"{self.image_id}: box {b} outside {self.width}x{self.height}")

    def boxes(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((0, 4))
        return np.array([ob.box.as_array() for ob in self.objects])

    def labels(self) -> np.ndarray:
        return np.array([ob.class_id for ob in self.objects], dtype=np.int64)

    def counts(self) -> tuple[int, int, int]:
        lab = self.labels()
        return tuple(int((lab == k).sum()) for k in (1, 2, 3))


def _text(parent: ET.Element, tag: str, path: str) -> str:
    el = parent.find(tag)
    if el is None or el.text is None or not el.text.strip():
        raise AnnotationError(f"{path}/{tag}: missing")
    return el.text.strip()


def _number(parent: ET.Element, tag: str, path: str) -> float:
    raw = _text(parent, tag, path)
    try:
        return float(raw)
    except ValueError:
        raise AnnotationError(f"{path}/{tag}: not a number: {raw!r}") from None


def parse_voc_xml(document: str) -> Annotation:
    try:
        root = ET.fromstring(document)
    except ET.ParseError as exc:
        raise AnnotationError(f"malformed XML: {exc}") from None
    if root.tag != "annotation":
        raise AnnotationError(f"{root.tag}: expected root element 'annotation'")
    filename = _text(root, "filename", "annotation")
    size = root.find("size")
    if size is None:
        raise AnnotationError("annotation/size: missing")
    width = _number(size, "width", "annotation/size")
    height = _number(size, "height", "annotation/size")
    objects = []
    for i, ob in enumerate(root.findall("object"), start=1):
        path = f"annotation/object[{i}]"
        name = _text(ob, "name", path)
        if name not in CELL_CLASSES:
            raise AnnotationError(f"{path}/name: unknown class {name!r}")
        bb = ob.find("bndbox")
        if bb is None:
            raise AnnotationError(f"{path}/bndbox: missing")
        bpath = path + "/bndbox"
        xmin, ymin, xmax, ymax = (_number(bb, t, bpath) for t in ("xmin", "ymin", "xmax", "ymax"))
        if xmin > xmax:
            raise AnnotationError(f"{bpath}: xmin {xmin} > xmax {xmax}")
        if ymin > ymax:
            raise AnnotationError(f"{bpath}: ymin {ymin} > ymax {ymax}")
        objects.append(LabeledBox(name, Box(xmin, ymin, xmax, ymax)))
    return Annotation(filename, int(width), int(height), tuple(objects))


def _fmt(v: float) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() else repr(v)


def write_voc_xml(ann: Annotation, depth: int = 3) -> str:
    root = ET.Element("annotation")
    ET.SubElement(root, "folder").text = "images"
    ET.SubElement(root, "filename").text = ann.image_id
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(ann.width)
    ET.SubElement(size, "height").text = str(ann.height)
    ET.SubElement(size, "depth").text = str(depth)
    for ob in ann.objects:
        el = ET.SubElement(root, "object")
        ET.SubElement(el, "name").text = ob.name
        ET.SubElement(el, "pose").text = "Unspecified"
        ET.SubElement(el, "truncated").text = "0"
        ET.SubElement(el, "difficult").text = "0"
        bb = ET.SubElement(el, "bndbox")
        for tag in ("xmin", "ymin", "xmax", "ymax"):
            ET.SubElement(bb, tag).text = _fmt(getattr(ob.box, tag))
    ET.indent(root)
    return ET.tostring(root, encoding="unicode") + "\n"


def read_annotation(path: str | Path) -> Annotation:
    path = Path(path)
    try:
        return parse_voc_xml(path.read_text())
    except AnnotationError as exc:
        raise AnnotationError(f"{path}: {exc}") from None


def save_annotation(path: str | Path, ann: Annotation) -> None:
    Path(path).write_text(write_voc_xml(ann))
