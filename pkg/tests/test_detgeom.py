import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reticount import oracles
from reticount.detgeom import (
    DEFAULT_ANCHORS,
    Box,
    Detection,
    AnchorSpec,
    FeatureMapSpec,
    decode,
    encode,
    generate_anchors,
    iou,
    iou_matrix,
    match_anchors,
    nms,
    read_detections,
    suppress_cross_class,
    to_center,
    write_detections,
)
from reticount.verify import check_iou, check_matching, check_nms, check_roundtrip, random_detections

coord = st.floats(0, 300, allow_nan=False)


@st.composite
def boxes(draw, min_side=0.0):
    x0, y0 = draw(coord), draw(coord)
    w = draw(st.floats(min_side, 120))
    h = draw(st.floats(min_side, 120))
    return Box(x0, y0, x0 + w, y0 + h)


# ---------------------------------------------------------------- IoU


def test_iou_examples():
    a = Box(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, Box(20, 20, 30, 30)) == 0.0
    assert iou(a, Box(5, 0, 15, 10)) == pytest.approx(1 / 3)
    assert oracles.raster_iou((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(1 / 3)


def test_iou_zero_union():
    z = Box(3, 3, 3, 3)
    assert iou(z, z) == 0.0


@given(boxes(), boxes())
def test_iou_symmetric_and_bounded(a, b):
    ab, ba = iou(a, b), iou(b, a)
    assert ab == ba
    assert 0.0 <= ab <= 1.0


@given(boxes(min_side=0.5))
def test_iou_self_is_one(a):
    assert iou(a, a) == pytest.approx(1.0)


def test_iou_against_raster_oracle():
    assert check_iou(500).passed


# ---------------------------------------------------------------- anchors


def test_anchor_counts():
    assert len(generate_anchors(AnchorSpec((FeatureMapSpec(3, 0.2, (1, 2, 0.5, 0.75)),)))) == 36
    enumerated = 0
    for fm in DEFAULT_ANCHORS.maps:
        for _row in range(fm.grid):
            for _col in range(fm.grid):
                enumerated += len(fm.ratios)
    assert len(generate_anchors()) == DEFAULT_ANCHORS.total == enumerated


def test_single_anchor_closed_form():
    a = generate_anchors(AnchorSpec((FeatureMapSpec(1, 0.5, (1.0,)),)), 300)
    np.testing.assert_allclose(a, [[75, 75, 225, 225]])


def test_anchor_layout_and_ordering():
    spec = AnchorSpec((FeatureMapSpec(2, 0.1, (1.0, 4.0)),))
    a = to_center(generate_anchors(spec, 100))
    # (row, col, ratio) order: row drives cy, column drives cx
    np.testing.assert_allclose(a[:, 0], [25, 25, 75, 75, 25, 25, 75, 75])
    np.testing.assert_allclose(a[:, 1], [25, 25, 25, 25, 75, 75, 75, 75])
    np.testing.assert_allclose(a[1, 2:], [20, 5])  # w = s*sqrt(r)*side, h = s/sqrt(r)*side


def test_anchors_clipped_and_deterministic():
    a = generate_anchors()
    assert a.min() >= 0 and a.max() <= 300
    assert a.tobytes() == generate_anchors().tobytes()


def test_anchor_spec_requires_increasing_scales():
    with pytest.raises(ValueError):
        AnchorSpec((FeatureMapSpec(4, 0.3, (1.0,)), FeatureMapSpec(2, 0.2, (1.0,))))


# ---------------------------------------------------------------- encode / decode


def test_encode_identity_and_width_doubling():
    anc = np.array([[10.0, 10.0, 30.0, 50.0]])
    np.testing.assert_allclose(encode(anc, anc), [[0, 0, 0, 0]])
    wide = np.array([[0.0, 10.0, 40.0, 50.0]])
    assert encode(wide, anc)[0, 2] == pytest.approx(math.log(2) / 0.2)
    assert math.log(2) / 0.2 == pytest.approx(3.4657, abs=1e-4)


def test_decode_examples():
    anc = np.array([[10.0, 10.0, 30.0, 50.0]])
    np.testing.assert_allclose(decode(np.zeros((1, 4)), anc), anc)
    np.testing.assert_allclose(decode(np.array([[0, 0, math.log(2) / 0.2, 0]]), anc), [[0, 10, 40, 50]])


def test_encode_rejects_degenerate_gt():
    with pytest.raises(ValueError):
        encode(np.array([[5.0, 5.0, 5.0, 9.0]]), np.array([[0.0, 0.0, 10.0, 10.0]]))


def test_decode_clips_and_survives_wild_offsets():
    out = decode(np.array([[0, 0, 1e6, -1e6]]), np.array([[100.0, 100.0, 140.0, 140.0]]), image_side=300)
    assert np.isfinite(out).all()
    assert out.min() >= 0 and out.max() <= 300


@settings(max_examples=100)
@given(boxes(min_side=1.0), boxes(min_side=1.0))
def test_encode_decode_round_trip(gt, anc):
    g = gt.as_array()[None]
    back = decode(encode(g, anc.as_array()[None]), anc.as_array()[None])
    np.testing.assert_allclose(back, g, atol=1e-5)


def test_round_trip_harness():
    assert check_roundtrip(100).passed


# ---------------------------------------------------------------- matching


def test_match_single_identical_anchor():
    anchors = np.array([[0, 0, 10, 10], [50, 50, 60, 60], [100, 100, 110, 110]], dtype=float)
    labels, idx = match_anchors(np.array([[50, 50, 60, 60]], float), [2], anchors)
    assert labels.tolist() == [0, 2, 0]
    assert idx.tolist() == [-1, 0, -1]


def test_match_no_gts():
    labels, idx = match_anchors(np.zeros((0, 4)), [], generate_anchors())
    assert not labels.any() and (idx == -1).all()


def test_stage_one_guarantees_an_anchor_below_threshold():
    anchors = np.array([[0, 0, 100, 100], [100, 0, 200, 100]], float)
    gt = np.array([[0, 0, 20, 20]], float)  # IoU 0.04 with its best anchor
    labels, idx = match_anchors(gt, [1], anchors)
    assert labels.tolist() == [1, 0]


def test_matching_against_brute_force():
    assert check_matching(100).passed


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_matching_five_gts_default_anchors(seed):
    rng = np.random.default_rng(seed)
    anchors = generate_anchors()
    c = rng.uniform(20, 280, (5, 2))
    r = rng.uniform(10, 30, (5, 1))
    gts = np.concatenate([c - r, c + r], axis=1)
    labels = rng.integers(1, 4, 5)
    lab, idx = match_anchors(gts, labels, anchors)
    ref_lab, ref_idx = oracles.brute_force_match(gts.tolist(), labels.tolist(), anchors.tolist(), 0.5)
    assert lab.tolist() == ref_lab and idx.tolist() == ref_idx
    assert all((idx == g).any() for g in range(5))


# ---------------------------------------------------------------- NMS


def test_nms_single_and_duplicate():
    d = Detection(Box(0, 0, 10, 10), 1, 0.9, 0)
    assert nms([d]) == [d]
    dup = Detection(Box(0, 0, 10, 10), 1, 0.8, 1)
    assert nms([dup, d], 0.45) == [d]


def test_nms_keeps_other_classes_and_applies_top_k():
    a = Detection(Box(0, 0, 10, 10), 1, 0.9, 0)
    b = Detection(Box(0, 0, 10, 10), 2, 0.8, 1)
    c = Detection(Box(50, 50, 60, 60), 3, 0.7, 2)
    assert nms([c, b, a]) == [a, b, c]
    assert nms([c, b, a], top_k=2) == [a, b]


def test_nms_drops_zero_area():
    assert nms([Detection(Box(5, 5, 5, 9), 1, 0.9, 0)]) == []


def test_nms_tie_break_by_anchor_index():
    a = Detection(Box(0, 0, 10, 10), 1, 0.5, 7)
    b = Detection(Box(1, 0, 11, 10), 1, 0.5, 3)
    assert nms([a, b]) == [b]


def test_nms_against_quadratic_oracle():
    assert check_nms(200).passed


def test_nms_200_detections_three_classes():
    rng = np.random.default_rng(11)
    dets = random_detections(rng, 200, 3)
    assert nms(dets, 0.45, 400) == oracles.quadratic_nms(dets, 0.45, 400)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 0.9))
def test_nms_survivors_are_an_antichain_subset(seed, thr):
    dets = random_detections(np.random.default_rng(seed), 40)
    kept = nms(dets, thr, 400)
    assert all(k in dets for k in kept)
    for cls in {k.class_id for k in kept}:
        bx = np.array([k.box.as_array() for k in kept if k.class_id == cls])
        m = iou_matrix(bx, bx)
        np.fill_diagonal(m, 0)
        assert (m <= thr).all()


def test_cross_class_keeps_the_more_confident_label():
    a = Detection(Box(0, 0, 10, 10), 2, 0.7, 0)
    b = Detection(Box(1, 0, 11, 10), 3, 0.9, 1)
    c = Detection(Box(30, 30, 40, 40), 2, 0.6, 2)
    assert suppress_cross_class([a, b, c]) == [b, c]
    assert suppress_cross_class([a, b, c], 1.0) == [b, a, c]


def test_cross_class_leaves_same_class_overlaps_to_nms():
    a = Detection(Box(0, 0, 10, 10), 1, 0.9, 0)
    b = Detection(Box(0, 0, 10, 10), 1, 0.8, 1)
    assert suppress_cross_class([a, b]) == [a, b]


def test_cross_class_suppressed_detection_does_not_suppress():
    # b loses to a; c overlaps only b, so it survives
    a = Detection(Box(0, 0, 10, 10), 1, 0.9, 0)
    b = Detection(Box(5, 0, 15, 10), 2, 0.8, 1)
    c = Detection(Box(10, 0, 20, 10), 1, 0.7, 2)
    assert suppress_cross_class([c, b, a], 0.3) == [a, c]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 0.9))
def test_cross_class_survivors_pairwise_below_threshold(seed, thr):
    dets = nms(random_detections(np.random.default_rng(seed), 40), 0.45, 400)
    kept = suppress_cross_class(dets, thr)
    assert all(k in dets for k in kept)
    assert [d for d in dets if d in kept] == kept
    for i, d in enumerate(kept):
        for e in kept[i + 1 :]:
            assert d.class_id == e.class_id or iou(d.box, e.box) <= thr


# ---------------------------------------------------------------- text format


def test_detection_text_round_trip(tmp_path):
    dets = {"b.png": [Detection(Box(1.23456, 2, 30, 40.5), 3, 0.87654, 5)], "a.png": [Detection(Box(0, 0, 10, 10), 1, 1.0, 0)]}
    path = tmp_path / "d.txt"
    write_detections(path, dets)
    lines = path.read_text().splitlines()
    assert lines == [
        "a.png aggregate_reticulocyte 1.0000 0.0000 0.0000 10.0000 10.0000",
        "b.png erythrocyte 0.8765 1.2346 2.0000 30.0000 40.5000",
    ]
    back = read_detections(path)
    assert back["b.png"][0].box.xmin == pytest.approx(1.2346)
    assert back["b.png"][0].class_id == 3


def test_detection_rejects_background_and_bad_confidence():
    with pytest.raises(ValueError):
        Detection(Box(0, 0, 1, 1), 0, 0.5)
    with pytest.raises(ValueError):
        Detection(Box(0, 0, 1, 1), 1, 1.5)
