import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reticount import oracles
from reticount.datapipe import (
    Annotation,
    AnnotationError,
    AugmentParams,
    LabeledBox,
    PlacementError,
    SmearSpec,
    apply_augment,
    generate_synthetic_smear,
    load_dataset,
    parse_voc_xml,
    plan_counts,
    read_annotation,
    read_image,
    render_smear,
    rgb_hsv,
    split_dataset,
    standardize_image,
    synthesize_dataset,
    write_image,
    write_voc_xml,
)
from reticount.datapipe.augment import map_points
from reticount.datapipe.imaging import lanczos_kernel, resample
from reticount.detgeom import Box, iou_matrix
from reticount.verify import augmentation_statistics, center_violations

MINIMAL = """<annotation>
  <filename>a.png</filename>
  <size><width>300</width><height>300</height><depth>3</depth></size>
  <object><name>erythrocyte</name><bndbox><xmin>10</xmin><ymin>10</ymin><xmax>50</xmax><ymax>50</ymax></bndbox></object>
</annotation>"""


# ---------------------------------------------------------------- VOC XML


def test_parse_minimal_document():
    ann = parse_voc_xml(MINIMAL)
    assert ann.image_id == "a.png" and (ann.width, ann.height) == (300, 300)
    assert ann.objects == (LabeledBox("erythrocyte", Box(10, 10, 50, 50)),)
    assert ann.counts() == (0, 0, 1)


def test_parse_zero_objects():
    doc = "<annotation><filename>b.png</filename><size><width>30</width><height>20</height></size></annotation>"
    ann = parse_voc_xml(doc)
    assert ann.objects == () and ann.boxes().shape == (0, 4)


@pytest.mark.parametrize(
    "mutate, where",
    [
        (lambda d: d.replace("</annotation>", ""), "malformed"),
        (lambda d: d.replace("<bndbox>", "<box>").replace("</bndbox>", "</box>"), "annotation/object[1]/bndbox"),
        (lambda d: d.replace("<xmin>10</xmin>", "<xmin>60</xmin>"), "annotation/object[1]/bndbox"),
        (lambda d: d.replace("erythrocyte", "leukocyte"), "annotation/object[1]/name"),
        (lambda d: d.replace("<ymax>50</ymax>", "<ymax>abc</ymax>"), "annotation/object[1]/bndbox/ymax"),
    ],
)
def test_parse_errors_name_element_path(mutate, where):
    with pytest.raises(AnnotationError, match=where.replace("[", r"\[").replace("]", r"\]")):
        parse_voc_xml(mutate(MINIMAL))


def test_read_annotation_names_file(tmp_path):
    p = tmp_path / "broken.xml"
    p.write_text("<annotation>")
    with pytest.raises(AnnotationError, match="broken.xml"):
        read_annotation(p)


@st.composite
def annotations(draw):
    w = draw(st.integers(50, 400))
    h = draw(st.integers(50, 400))
    objs = []
    for _ in range(draw(st.integers(0, 6))):
        x0 = draw(st.one_of(st.integers(0, w - 1), st.floats(0, w - 1)))
        y0 = draw(st.one_of(st.integers(0, h - 1), st.floats(0, h - 1)))
        x1 = draw(st.floats(float(x0), float(w)))
        y1 = draw(st.floats(float(y0), float(h)))
        name = draw(st.sampled_from(["aggregate_reticulocyte", "punctate_reticulocyte", "erythrocyte"]))
        objs.append(LabeledBox(name, Box(float(x0), float(y0), x1, y1)))
    return Annotation(draw(st.from_regex(r"[a-z]{1,8}\.png", fullmatch=True)), w, h, tuple(objs))


@settings(max_examples=50, deadline=None)
@given(annotations())
def test_xml_round_trip(ann):
    assert parse_voc_xml(write_voc_xml(ann)) == ann


def test_integer_coordinates_written_exactly():
    assert "<xmin>10</xmin>" in write_voc_xml(parse_voc_xml(MINIMAL))


# ---------------------------------------------------------------- images and standardization


def test_png_and_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (7, 5, 3)).astype(np.float32) / 255
    for ext in ("png", "ppm"):
        write_image(tmp_path / f"x.{ext}", img)
        np.testing.assert_allclose(read_image(tmp_path / f"x.{ext}"), img, atol=1e-7)
    with pytest.raises(ValueError):
        write_image(tmp_path / "x.jpg", img)


def test_lanczos_kernel_values():
    assert lanczos_kernel(np.array([0.0]))[0] == 1.0
    np.testing.assert_allclose(lanczos_kernel(np.array([1.0, 2.0, 3.0, 4.0])), 0.0, atol=1e-15)


def test_resample_identity_at_300():
    img = np.random.default_rng(1).random((300, 300, 3)).astype(np.float32)
    out, _, _ = standardize_image(img, "resample")
    assert np.abs(out - img).max() < 1e-6


@pytest.mark.parametrize("shape", [(600, 600), (450, 380), (150, 200), (301, 299)])
def test_resample_preserves_constants(shape):
    img = np.full(shape + (3,), 0.37, np.float32)
    out, _, _ = standardize_image(img, "resample")
    assert out.shape == (300, 300, 3)
    assert np.abs(out - 0.37).max() < 1e-6


def test_downscale_matches_direct_summation():
    yy, xx = np.mgrid[0:60, 0:60]
    pattern = (np.sin(xx / 3.0) * np.cos(yy / 5.0) + 0.01 * xx)[..., None].repeat(3, axis=2)
    fast = resample(pattern, 30, 30)
    slow = oracles.direct_lanczos(pattern, 30, 30)
    assert np.abs(fast - slow).max() < 1e-5


@pytest.mark.slow
def test_600_to_300_matches_direct_summation_on_a_patch():
    rng = np.random.default_rng(2)
    img = rng.random((600, 600, 3))
    fast = resample(img, 300, 300)
    # columns 0..23 of the output only read input columns below 60
    full_slow = oracles.direct_lanczos(img[:, :60], 300, 30)
    assert np.abs(fast[:, :24] - full_slow[:, :24]).max() < 1e-5


def test_resample_maps_boxes():
    img = np.zeros((600, 450, 3), np.float32)
    _, boxes, keep = standardize_image(img, "resample", boxes=np.array([[60.0, 120.0, 90.0, 240.0]]))
    np.testing.assert_allclose(boxes, [[40.0, 60.0, 60.0, 120.0]])
    assert keep.tolist() == [0]


def test_crop_policy():
    img = np.random.default_rng(3).random((400, 500, 3)).astype(np.float32)
    out, boxes, keep = standardize_image(img, "crop", (100, 50), np.array([[90.0, 60.0, 120.0, 80.0], [0, 0, 50, 40]]))
    np.testing.assert_array_equal(out, img[50:350, 100:400])
    np.testing.assert_allclose(boxes, [[0, 10, 20, 30]])
    assert keep.tolist() == [0]
    with pytest.raises(ValueError):
        standardize_image(np.zeros((200, 400, 3)), "crop")


# ---------------------------------------------------------------- HSV


def test_hsv_fixed_points():
    np.testing.assert_allclose(rgb_hsv(np.array([1.0, 0.0, 0.0])), [0, 1, 1])
    hsv = rgb_hsv(np.array([0.5, 0.5, 0.5]))
    assert hsv[1] == 0 and hsv[2] == 0.5


def test_hsv_round_trip_1000_pixels():
    px = np.random.default_rng(4).random((1000, 3))
    assert np.abs(rgb_hsv(rgb_hsv(px), "to_rgb") - px).max() < 1e-5


# ---------------------------------------------------------------- augmentation


def test_flip_only():
    img = np.zeros((300, 300, 3), np.float32)
    _, bx, keep = apply_augment(img, np.array([[10.0, 20.0, 50.0, 60.0]]), AugmentParams(flip=True))
    np.testing.assert_allclose(bx, [[250, 20, 290, 60]])
    assert keep.tolist() == [0]


def test_flip_mirrors_pixels():
    img = np.random.default_rng(5).random((300, 300, 3)).astype(np.float32)
    out, _, _ = apply_augment(img, np.zeros((0, 4)), AugmentParams(flip=True))
    np.testing.assert_array_equal(out, img[:, ::-1])


def test_translate_only():
    img = np.random.default_rng(6).random((300, 300, 3)).astype(np.float32)
    boxes = np.array([[10.0, 20.0, 50.0, 60.0], [200, 200, 240, 250]])
    out, bx, _ = apply_augment(img, boxes, AugmentParams(shift=(30, 10)))
    np.testing.assert_allclose(bx, boxes + [30, 10, 30, 10])
    np.testing.assert_array_equal(out[10:, 30:], img[:-10, :-30])
    assert not out[:10].any() and not out[:, :30].any()


def test_brightness_only_leaves_boxes():
    img = np.full((300, 300, 3), 0.3, np.float32)
    boxes = np.array([[10.0, 20.0, 50.0, 60.0]])
    out, bx, _ = apply_augment(img, boxes, AugmentParams(brightness=2.0))
    np.testing.assert_array_equal(bx, boxes)
    np.testing.assert_allclose(out, 0.6, atol=1e-6)
    out, _, _ = apply_augment(img, boxes, AugmentParams(brightness=5.0))
    assert out.max() <= 1.0


def test_scale_about_center():
    img = np.zeros((300, 300, 3), np.float32)
    img[140:160, 140:160] = 1.0
    out, bx, _ = apply_augment(img, np.array([[140.0, 140.0, 160.0, 160.0]]), AugmentParams(scale=1.5))
    np.testing.assert_allclose(bx, [[135, 135, 165, 165]])
    assert out[150, 150, 0] == pytest.approx(1.0)
    assert out[136:164, 136:164].min() > 0.99 and out[:130].max() == 0
    small, _, _ = apply_augment(np.ones((300, 300, 3), np.float32), np.zeros((0, 4)), AugmentParams(scale=0.5))
    assert small[0, 0, 0] == 0.0 and small[150, 150, 0] == pytest.approx(1.0)


def test_drop_when_center_leaves_image():
    boxes = np.array([[0.0, 100.0, 40.0, 140.0], [0.0, 100.0, 100.0, 140.0]])
    _, bx, keep = apply_augment(np.zeros((300, 300, 3), np.float32), boxes, AugmentParams(shift=(-30, 0)))
    assert keep.tolist() == [1]
    np.testing.assert_allclose(bx, [[0, 100, 70, 140]])


def test_map_points_matches_box_centres():
    p = AugmentParams(flip=True, shift=(12, -7), scale=1.2)
    boxes = np.array([[100.0, 100.0, 130.0, 140.0]])
    _, bx, _ = apply_augment(np.zeros((300, 300, 3), np.float32), boxes, p)
    c = map_points(np.array([[115.0, 120.0]]), p, 300, 300)
    np.testing.assert_allclose(c, 0.5 * (bx[:, :2] + bx[:, 2:]))


def test_augmentation_statistics():
    s = augmentation_statistics(10_000)
    for k in ("flip", "translate", "scale", "brightness"):
        assert abs(s[k] - 5000) <= 150
    assert s["max_abs_shift"] <= 50
    assert 0.5 <= s["scale_min"] and s["scale_max"] <= 1.5
    assert abs(s["scale_mean"] - 1.0) <= 0.02
    assert 0.5 <= s["brightness_min"] and s["brightness_max"] <= 2.0


def test_centre_enclosure_small():
    violations, checked = center_violations(scenes=10, draws_per_scene=10, seed=3)
    assert checked > 0 and violations == 0


# ---------------------------------------------------------------- synthetic smears


def test_single_aggregate():
    _, ann = generate_synthetic_smear(SmearSpec(counts=(1, 0, 0)), np.random.default_rng(0))
    assert ann.counts() == (1, 0, 0)
    assert ann.objects[0].name == "aggregate_reticulocyte"


def test_balanced_counts():
    _, ann = generate_synthetic_smear(SmearSpec(counts=(10, 10, 20), radius_range=(10, 13)), np.random.default_rng(1))
    assert ann.counts() == (10, 10, 20)


def test_distractors_are_erythrocytes():
    scene = render_smear(SmearSpec(counts=(0, 0, 1), distractors=2), np.random.default_rng(2))
    assert scene.annotation.counts() == (0, 0, 3)
    assert sorted(c.kind for c in scene.cells) == ["erythrocyte", "heinz", "heinz"]


def test_overlap_cap_exhaustive():
    for i in range(100):
        spec = SmearSpec(counts=(3, 3, 5), distractors=1)
        _, ann = generate_synthetic_smear(spec, np.random.default_rng([9, i]))
        m = iou_matrix(ann.boxes(), ann.boxes())
        np.fill_diagonal(m, 0)
        assert m.max() <= spec.overlap_cap


def test_boxes_are_exact_disc_squares():
    scene = render_smear(SmearSpec(counts=(1, 1, 1), blur=0, noise=0), np.random.default_rng(3))
    for cell, ob in zip(scene.cells, scene.annotation.objects):
        assert ob.box == Box(cell.cx - cell.r, cell.cy - cell.r, cell.cx + cell.r, cell.cy + cell.r)
        # the disc centre is painted as cell, not background
        y, x = int(cell.cy), int(cell.cx)
        assert not np.allclose(scene.image[y, x], scene.image[2, 2], atol=0.02) or cell.kind != "erythrocyte"


def test_placement_failure_reports_count():
    with pytest.raises(PlacementError) as err:
        generate_synthetic_smear(SmearSpec(side=60, radius_range=(20, 20), counts=(0, 0, 5)), np.random.default_rng(0))
    assert err.value.requested == 5 and err.value.placed < 5


def test_smear_spec_validation():
    with pytest.raises(ValueError):
        SmearSpec(overlap_cap=1.0)
    with pytest.raises(ValueError):
        SmearSpec(radius_range=(5, 2))


def test_plan_counts_ratio_and_pinned_aggregates():
    plan = plan_counts(40, np.random.default_rng(0), (1, 1, 2), (8, 12), 0.0, aggregate_total=78)
    totals = np.sum(plan, axis=0)
    assert totals[0] == 78
    plan = plan_counts(50, np.random.default_rng(1), (1, 1, 2), (8, 8), 0.0)
    assert tuple(np.sum(plan, axis=0)) == (100, 100, 200, 0)


def test_synthesize_dataset_is_byte_identical(tmp_path):
    a = synthesize_dataset(tmp_path / "a", 3, seed=7)
    synthesize_dataset(tmp_path / "b", 3, seed=7)
    for sub in ("images", "annotations"):
        for f in sorted((tmp_path / "a" / sub).iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()
    m = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert m["seed"] == 7 and len(m["images"]) == 3 == a["n_images"]
    samples = load_dataset(tmp_path / "a")
    assert [s.counts() for s in samples] == [tuple(e["counts"]) for e in m["images"]]
    assert [list(s.heinz) for s in samples] == [e["heinz"] for e in m["images"]]


def test_smartphone_preset_is_blurrier(tmp_path):
    synthesize_dataset(tmp_path / "m", 1, seed=1)
    synthesize_dataset(tmp_path / "s", 1, seed=1, preset="smartphone")
    m = read_image(tmp_path / "m" / "images" / "smear_0000.png")
    s = read_image(tmp_path / "s" / "images" / "smear_0000.png")
    assert np.abs(np.diff(s, axis=1)).mean() != np.abs(np.diff(m, axis=1)).mean()


# ---------------------------------------------------------------- splitting


def test_split_published_sizes():
    train, val = split_dataset(list(range(1046)), 0.765, seed=0)
    assert (len(train), len(val)) == (800, 246)


def test_split_limits():
    train, val = split_dataset(list(range(10)), 0.9, seed=0)
    assert (len(train), len(val)) == (9, 1)
    train, val = split_dataset(list(range(10)), 0.01, seed=0)
    assert (len(train), len(val)) == (1, 9)
    with pytest.raises(ValueError):
        split_dataset(list(range(10)), 1.0, seed=0)


@given(st.integers(2, 300), st.floats(0.01, 0.99), st.integers(0, 100))
def test_split_is_a_seeded_partition(n, f, seed):
    items = list(range(n))
    train, val = split_dataset(items, f, seed)
    assert sorted(train + val) == items
    assert not set(train) & set(val)
    assert (train, val) == split_dataset(items, f, seed)
