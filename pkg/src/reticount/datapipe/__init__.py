"""Annotations, image standardization, augmentation and synthetic smears."""

from .augment import AugmentParams, apply_augment, augment, map_points, sample_augment_params
from .dataset import Sample, load_annotations, load_dataset, split_dataset
from .imaging import read_image, rgb_hsv, standardize_image, write_image
from .synth import (
    PlacementError,
    SmearScene,
    SmearSpec,
    generate_synthetic_smear,
    plan_counts,
    render_smear,
    synthesize_dataset,
)
from .voc import Annotation, AnnotationError, LabeledBox, parse_voc_xml, read_annotation, write_voc_xml

__all__ = [
    "Annotation",
    "AnnotationError",
    "AugmentParams",
    "LabeledBox",
    "PlacementError",
    "Sample",
    "SmearScene",
    "SmearSpec",
    "apply_augment",
    "augment",
    "generate_synthetic_smear",
    "load_annotations",
    "load_dataset",
    "map_points",
    "parse_voc_xml",
    "plan_counts",
    "read_annotation",
    "read_image",
    "render_smear",
    "rgb_hsv",
    "sample_augment_params",
    "split_dataset",
    "standardize_image",
    "synthesize_dataset",
    "write_image",
    "write_voc_xml",
]
