"""Oracle and property suites run by ``reticount verify``."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import oracles
from .detgeom import (
    DEFAULT_ANCHORS,
    Box,
    Detection,
    decode,
    encode,
    generate_anchors,
    iou_matrix,
    match_anchors,
    nms,
)
from .ndtensor import (
    LayerParams,
    batchnorm2d_backward,
    batchnorm2d_forward,
    conv2d_backward,
    conv2d_forward,
    cross_entropy,
    finite_difference_check,
    maxpool2d_backward,
    maxpool2d_forward,
    relu_backward,
    relu_forward,
    smooth_l1,
    softmax,
    softmax_backward,
)

GRAD_TOL = 1e-4
SEEDS = 20


@dataclass
class PropertyResult:
    name: str
    value: float
    tolerance: float
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<40s} max_error={self.value:.3e}  tol={self.tolerance:.1e}"


def _upto(name: str, values, tol: float) -> PropertyResult:
    worst = float(max(values)) if len(values) else 0.0
    return PropertyResult(name, worst, tol, worst <= tol)


# ---------------------------------------------------------------------------
# gradient checks (float64 so the central differences are trustworthy)
# ---------------------------------------------------------------------------


def grad_conv(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    stride, pad = (1, 1) if seed % 2 else (2, 1)
    out, cache = conv2d_forward(x, w, b, stride, pad)
    r = rng.standard_normal(out.shape)
    dx, dw, db = conv2d_backward(r, cache)
    f = lambda x, w, b: float((conv2d_forward(x, w, b, stride, pad)[0] * r).sum())  # noqa: E731
    return finite_difference_check(f, {"x": x, "w": w, "b": b}, {"x": dx, "w": dw, "b": db})


def grad_maxpool(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6).astype(np.float64) * 0.1
    out, cache = maxpool2d_forward(x, 2, 2)
    r = rng.standard_normal(out.shape)
    dx = maxpool2d_backward(r, cache)
    f = lambda x: float((maxpool2d_forward(x, 2, 2)[0] * r).sum())  # noqa: E731
    return finite_difference_check(f, {"x": x}, {"x": dx})


def grad_batchnorm(seed: int, training: bool = True) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 4, 4)) * 2 + 0.5
    g = rng.uniform(0.5, 1.5, 3)
    bt = rng.standard_normal(3)
    rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)

    def run(x, g, bt):
        return batchnorm2d_forward(x, LayerParams(g, bt, rm, rv), training)

    out, cache, _ = run(x, g, bt)
    r = rng.standard_normal(out.shape)
    dx, dg, db = batchnorm2d_backward(r, cache)
    f = lambda x, g, bt: float((run(x, g, bt)[0] * r).sum())  # noqa: E731
    return finite_difference_check(f, {"x": x, "g": g, "bt": bt}, {"x": dx, "g": dg, "bt": db})


def grad_relu(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.uniform(0.05, 1.0, (3, 7)) * rng.choice([-1, 1], (3, 7))
    out, mask = relu_forward(x)
    r = rng.standard_normal(out.shape)
    dx = relu_backward(r, mask)
    f = lambda x: float((relu_forward(x)[0] * r).sum())  # noqa: E731
    return finite_difference_check(f, {"x": x}, {"x": dx})


def grad_softmax(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 5))
    p = softmax(x, axis=-1)
    r = rng.standard_normal(p.shape)
    dx = softmax_backward(r, p, axis=-1)
    f = lambda x: float((softmax(x, axis=-1) * r).sum())  # noqa: E731
    return finite_difference_check(f, {"x": x}, {"x": dx})


def grad_smooth_l1(seed: int) -> float:
    rng = np.random.default_rng(seed)
    t = rng.standard_normal((5, 4))
    d = rng.uniform(0.05, 2.5, (5, 4))
    d = np.where(np.abs(d - 1.0) < 0.05, d + 0.1, d) * rng.choice([-1, 1], (5, 4))
    pred = t + d
    _, g = smooth_l1(pred, t)
    f = lambda pred: smooth_l1(pred, t)[0]  # noqa: E731
    return finite_difference_check(f, {"pred": pred}, {"pred": g})


def grad_cross_entropy(seed: int) -> float:
    rng = np.random.default_rng(seed)
    p = softmax(rng.standard_normal((6, 4)), axis=-1)
    t = rng.integers(0, 4, 6)
    _, g = cross_entropy(p, t)
    f = lambda p: float(cross_entropy(p, t)[0].sum())  # noqa: E731
    return finite_difference_check(f, {"p": p}, {"p": g}, eps=1e-7)


def grad_multibox(seed: int) -> float:
    from .multibox import MatchedTargets, multibox_loss

    rng = np.random.default_rng(seed)
    n, a, c = 2, 12, 4
    logits = rng.standard_normal((n, a, c))
    offs = rng.standard_normal((n, a, 4))
    labels = np.zeros((n, a), dtype=np.int64)
    labels[0, rng.choice(a, 2, replace=False)] = rng.integers(1, c, 2)
    labels[1, rng.choice(a, 1)] = rng.integers(1, c)
    t_off = offs + rng.uniform(0.1, 0.8, offs.shape) * rng.choice([-1, 1], offs.shape)
    t_off[0, 0] += 2.0
    targets = MatchedTargets(labels, t_off)
    _, dl, do, _ = multibox_loss(logits, offs, targets)
    f = lambda logits, offs: multibox_loss(logits, offs, targets)[0]  # noqa: E731
    return finite_difference_check(f, {"logits": logits, "offs": offs}, {"logits": dl, "offs": do})


def grad_composite(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3)) * 0.5
    b = rng.standard_normal(3) * 0.1
    g = rng.uniform(0.5, 1.5, 3)
    bt = rng.standard_normal(3) * 0.1
    zeros, ones = np.zeros(3), np.ones(3)
    r = rng.standard_normal((1, 3, 6, 6))

    def fwd(x, w, b, g, bt):
        h, c1 = conv2d_forward(x, w, b, 1, 1)
        h, c2, _ = batchnorm2d_forward(h, LayerParams(g, bt, zeros, ones), True)
        h, m = relu_forward(h)
        return float((h * r).sum()), (c1, c2, m)

    _, (c1, c2, m) = fwd(x, w, b, g, bt)
    dh = relu_backward(r, m)
    dh, dg, dbt = batchnorm2d_backward(dh, c2)
    dx, dw, db = conv2d_backward(dh, c1)
    f = lambda **kw: fwd(**kw)[0]  # noqa: E731
    return finite_difference_check(
        f,
        {"x": x, "w": w, "b": b, "g": g, "bt": bt},
        {"x": dx, "w": dw, "g": dg, "bt": dbt},
    )


GRAD_CHECKS: dict[str, Callable[[int], float]] = {
    "conv2d": grad_conv,
    "maxpool2d": grad_maxpool,
    "batchnorm2d (training)": grad_batchnorm,
    "batchnorm2d (inference)": lambda s: grad_batchnorm(s, training=False),
    "relu": grad_relu,
    "softmax": grad_softmax,
    "smooth_l1": grad_smooth_l1,
    "cross_entropy": grad_cross_entropy,
    "multibox_loss": grad_multibox,
    "conv-bn-relu composite": grad_composite,
}


def suite_grad(seeds: int = SEEDS) -> list[PropertyResult]:
    return [_upto(f"grad {name}", [fn(s) for s in range(seeds)], GRAD_TOL) for name, fn in GRAD_CHECKS.items()]


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def random_int_boxes(rng, n, lo=0, hi=40, max_side=25):
    x0 = rng.integers(lo, hi, n)
    y0 = rng.integers(lo, hi, n)
    return np.stack([x0, y0, x0 + rng.integers(1, max_side, n), y0 + rng.integers(1, max_side, n)], axis=1).astype(np.float64)


def random_detections(rng, n, n_classes=3, side=300.0):
    c = rng.uniform(20, side - 20, (n, 2))
    wh = rng.uniform(10, 60, (n, 2))
    boxes = np.concatenate([c - wh / 2, c + wh / 2], axis=1)
    conf = np.round(rng.uniform(0.05, 1.0, n), 2)  # rounding forces confidence ties
    cls = rng.integers(1, n_classes + 1, n)
    return [Detection(Box.from_array(boxes[i]), int(cls[i]), float(conf[i]), i) for i in range(n)]


def check_iou(cases: int = 500, seed: int = 0) -> PropertyResult:
    rng = np.random.default_rng(seed)
    a = random_int_boxes(rng, cases)
    b = random_int_boxes(rng, cases)
    fast = np.array([iou_matrix(a[i], b[i])[0, 0] for i in range(cases)])
    slow = np.array([oracles.raster_iou(a[i], b[i]) for i in range(cases)])
    return _upto("iou vs raster oracle", np.abs(fast - slow), 1e-12)


def check_nms(cases: int = 200, seed: int = 1) -> PropertyResult:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(cases):
        dets = random_detections(rng, int(rng.integers(1, 60)))
        thr = float(rng.choice([0.3, 0.45, 0.6]))
        top_k = int(rng.integers(5, 80))
        if nms(dets, thr, top_k) != oracles.quadratic_nms(dets, thr, top_k):
            bad += 1
    return PropertyResult("nms vs quadratic oracle (mismatches)", float(bad), 0.0, bad == 0)


def check_matching(cases: int = 100, seed: int = 2) -> PropertyResult:
    rng = np.random.default_rng(seed)
    anchors = generate_anchors(DEFAULT_ANCHORS, 300)
    bad = 0
    for _ in range(cases):
        n = int(rng.integers(0, 6))
        c = rng.uniform(15, 285, (n, 2))
        r = rng.uniform(8, 40, (n, 1))
        gts = np.concatenate([c - r, c + r], axis=1)
        labels = rng.integers(1, 4, n)
        lab, idx = match_anchors(gts, labels, anchors, 0.5)
        ref_lab, ref_idx = oracles.brute_force_match(gts.tolist(), labels.tolist(), anchors.tolist(), 0.5)
        if lab.tolist() != list(ref_lab) or idx.tolist() != list(ref_idx):
            bad += 1
    return PropertyResult("matching vs brute-force oracle (mismatches)", float(bad), 0.0, bad == 0)


def check_roundtrip(cases: int = 100, seed: int = 3) -> PropertyResult:
    rng = np.random.default_rng(seed)
    c = rng.uniform(0, 300, (cases, 2))
    wh = rng.uniform(2, 120, (cases, 2))
    gt = np.concatenate([c - wh / 2, c + wh / 2], axis=1)
    c = rng.uniform(0, 300, (cases, 2))
    wh = rng.uniform(5, 150, (cases, 2))
    anchors = np.concatenate([c - wh / 2, c + wh / 2], axis=1)
    back = decode(encode(gt, anchors), anchors)
    return _upto("encode/decode round trip", np.abs(back - gt).ravel(), 1e-5)


def suite_geom(scale: int = 1) -> list[PropertyResult]:
    return [
        check_iou(500 * scale),
        check_nms(200 * scale),
        check_matching(100 * scale),
        check_roundtrip(100 * scale),
    ]


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


def augmentation_statistics(draws: int = 10_000, seed: int = 0) -> dict:
    from .datapipe.augment import sample_augment_params

    rng = np.random.default_rng(seed)
    params = [sample_augment_params(rng) for _ in range(draws)]
    shifts = np.array([p.shift for p in params if p.shift is not None])
    scales = np.array([p.scale for p in params if p.scale is not None])
    bright = np.array([p.brightness for p in params if p.brightness is not None])
    return {
        "flip": sum(p.flip for p in params),
        "translate": len(shifts),
        "scale": len(scales),
        "brightness": len(bright),
        "max_abs_shift": int(np.abs(shifts).max()) if len(shifts) else 0,
        "scale_min": float(scales.min()),
        "scale_max": float(scales.max()),
        "scale_mean": float(scales.mean()),
        "brightness_min": float(bright.min()),
        "brightness_max": float(bright.max()),
    }


def center_violations(scenes: int = 50, draws_per_scene: int = 20, seed: int = 0) -> tuple[int, int]:
    """Count surviving boxes that fail to enclose their transformed cell center."""
    from .datapipe.augment import apply_augment, map_points, sample_augment_params
    from .datapipe.synth import SmearSpec, render_smear

    rng = np.random.default_rng(seed)
    checked = violations = 0
    for s in range(scenes):
        scene = render_smear(SmearSpec(counts=(2, 2, 4), distractors=1, blur=0, noise=0), np.random.default_rng([seed, s]))
        centers = np.array([[c.cx, c.cy] for c in scene.cells])
        boxes = scene.annotation.boxes()
        for _ in range(draws_per_scene):
            p = sample_augment_params(rng)
            _, bx, keep = apply_augment(scene.image, boxes, p)
            pts = map_points(centers[keep], p, 300, 300)
            inside = (pts[:, 0] >= bx[:, 0]) & (pts[:, 0] <= bx[:, 2]) & (pts[:, 1] >= bx[:, 1]) & (pts[:, 1] <= bx[:, 3])
            checked += len(keep)
            violations += int((~inside).sum())
    return violations, checked


def suite_aug(draws: int = 10_000) -> list[PropertyResult]:
    st = augmentation_statistics(draws)
    half = draws / 2
    band = 150 * draws / 10_000
    out = [
        PropertyResult(f"{k} firing count - {half:.0f}", abs(st[k] - half), band, abs(st[k] - half) <= band)
        for k in ("flip", "translate", "scale", "brightness")
    ]
    out.append(PropertyResult("max |translation| (px)", st["max_abs_shift"], 50, st["max_abs_shift"] <= 50))
    out.append(
        PropertyResult(
            "scale factor outside [0.5, 1.5]",
            max(0.5 - st["scale_min"], st["scale_max"] - 1.5, 0.0),
            0.0,
            st["scale_min"] >= 0.5 and st["scale_max"] <= 1.5,
        )
    )
    out.append(PropertyResult("|mean scale factor - 1|", abs(st["scale_mean"] - 1.0), 0.02, abs(st["scale_mean"] - 1.0) <= 0.02))
    out.append(
        PropertyResult(
            "brightness outside [0.5, 2.0]",
            max(0.5 - st["brightness_min"], st["brightness_max"] - 2.0, 0.0),
            0.0,
            st["brightness_min"] >= 0.5 and st["brightness_max"] <= 2.0,
        )
    )
    v, n = center_violations()
    out.append(PropertyResult(f"box misses cell center ({n} boxes)", float(v), 0.0, v == 0))
    return out


SUITES = {"grad": suite_grad, "geom": suite_geom, "aug": suite_aug}


def run(suite: str) -> list[PropertyResult]:
    if suite == "all":
        return [r for fn in SUITES.values() for r in fn()]
    return SUITES[suite]()
