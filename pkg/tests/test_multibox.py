import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reticount import oracles
from reticount.datapipe import Sample
from reticount.detgeom import DEFAULT_ANCHORS, AnchorSpec, FeatureMapSpec
from reticount.multibox import (
    BlockSpec,
    MatchedTargets,
    ModelConfig,
    TrainOptions,
    build_model,
    build_targets,
    forward_detect,
    load_network,
    multibox_loss,
    overfit,
    preprocess,
    random_class_map,
    run_count_regression_ablation,
    save_network,
    select_hard_negatives,
    subsample_class_weights,
    subsample_network_classes,
    train,
)
from reticount.ndtensor import LayerParams, ShapeError, finite_difference_check
from reticount.optim import AdamHyper

TINY = ModelConfig(
    input_side=32,
    blocks=(BlockSpec(4, 2), BlockSpec(6, 1, pool=True), BlockSpec(6, 2)),
    taps=(2, 3),
    anchors=AnchorSpec((FeatureMapSpec(8, 0.25, (1.0, 2.0)), FeatureMapSpec(4, 0.5, (1.0,)))),
)


def tiny_sample(seed=0, boxes=((4.0, 4.0, 14.0, 14.0), (16.0, 18.0, 28.0, 30.0)), labels=(1, 3)):
    rng = np.random.default_rng(seed)
    img = rng.random((32, 32, 3)).astype(np.float32) * 0.2
    for (x0, y0, x1, y1), lab in zip(boxes, labels):
        img[int(y0) : int(y1), int(x0) : int(x1), lab - 1] = 1.0
    return Sample(f"t{seed}.png", img, np.array(boxes, float).reshape(-1, 4), np.array(labels, np.int64))


# ---------------------------------------------------------------- network shapes


def test_default_output_shapes():
    net = build_model()
    cls, loc, _, _ = net.forward(preprocess(np.zeros((2, 300, 300, 3), np.float32)))
    assert cls.shape == (2, DEFAULT_ANCHORS.total, 4)
    assert loc.shape == (2, DEFAULT_ANCHORS.total, 4)
    assert net.n_anchors == DEFAULT_ANCHORS.total


def test_tap_sizes_match_anchor_grids():
    cfg = ModelConfig()
    sizes = cfg.block_sizes()
    assert [sizes[t - 1] for t in cfg.taps] == [fm.grid for fm in cfg.anchors.maps]


def test_same_seed_same_weights():
    a, b = build_model(TINY, 3), build_model(TINY, 3)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    c = build_model(TINY, 4)
    assert any(a.params[k].tobytes() != c.params[k].tobytes() for k in a.params if k.endswith("/w"))


def test_single_anchor_configuration():
    cfg = ModelConfig(
        input_side=8,
        blocks=(BlockSpec(2, 8),),
        taps=(1,),
        anchors=AnchorSpec((FeatureMapSpec(1, 0.5, (1.0,)),)),
        n_classes=2,
    )
    cls, loc, _, _ = build_model(cfg).forward(np.zeros((1, 3, 8, 8), np.float32))
    assert cls.shape == (1, 1, 2) and loc.shape == (1, 1, 4)


def test_mismatched_tap_rejected():
    bad = ModelConfig(taps=(4, 4, 5))
    with pytest.raises(ShapeError, match="anchor grid"):
        build_model(bad)
    with pytest.raises(ValueError):
        ModelConfig(taps=(4, 5))


def test_save_load_round_trip_and_shape_diff(tmp_path):
    net = build_model(TINY, 1)
    save_network(tmp_path / "m.ckpt", net, extra={"epoch": 3})
    back, state, extra = load_network(tmp_path / "m.ckpt")
    assert state is None and extra == {"epoch": 3} and back.config == TINY
    x = preprocess(tiny_sample().image)
    np.testing.assert_array_equal(net.forward(x)[0], back.forward(x)[0])
    other = ModelConfig(**{**TINY.__dict__, "n_classes": 5})
    with pytest.raises(ShapeError, match="head1/cls/w"):
        load_network(tmp_path / "m.ckpt", other)


# ---------------------------------------------------------------- loss


def test_loss_zero_localization_when_offsets_match():
    rng = np.random.default_rng(0)
    labels = np.array([[0, 2, 0, 0, 1, 0]])
    offs = rng.standard_normal((1, 6, 4))
    t = MatchedTargets(labels, offs.copy())
    _, _, doff, parts = multibox_loss(rng.standard_normal((1, 6, 4)), offs, t)
    assert parts["loc"] == 0.0 and not doff.any()


def test_all_background_limit():
    logits = np.zeros((1, 40, 4))
    logits[..., 0] = 30.0
    loss, _, _, parts = multibox_loss(logits, np.zeros((1, 40, 4)), MatchedTargets(np.zeros((1, 40), int), np.zeros((1, 40, 4))))
    assert parts["n_pos"] == 0 and parts["loc"] == 0.0
    assert 0 <= loss < 1e-9


def test_no_positive_image_uses_negative_floor():
    ce = np.arange(50, dtype=float)[None]
    mask = select_hard_negatives(ce, np.zeros((1, 50), int))
    assert mask.sum() == 32 and mask[0, 18:].all()


@pytest.mark.parametrize("seed", range(30))
def test_hard_negatives_against_exhaustive_oracle(seed):
    rng = np.random.default_rng(seed)
    labels = np.zeros((1, 6), int)
    labels[0, rng.choice(6, rng.integers(0, 3), replace=False)] = 1
    ce = rng.integers(0, 4, (1, 6)).astype(float)  # coarse values force ties
    mask = select_hard_negatives(ce, labels, 3.0, 2)
    best_set, best = oracles.exhaustive_hard_negatives(ce[0].tolist(), labels[0].tolist(), 3.0, 2)
    assert ce[0, mask[0]].sum() == best
    assert mask[0].sum() == len(best_set)
    assert not (mask & (labels > 0)).any()


def test_loss_invariant_to_anchor_permutation():
    rng = np.random.default_rng(5)
    n, a = 2, 20
    logits = rng.standard_normal((n, a, 4))
    offs = rng.standard_normal((n, a, 4))
    labels = np.zeros((n, a), int)
    labels[0, [2, 7]] = [1, 3]
    labels[1, 11] = 2
    tgt = rng.standard_normal((n, a, 4))
    base = multibox_loss(logits, offs, MatchedTargets(labels, tgt))[0]
    perm = rng.permutation(a)
    shuffled = multibox_loss(logits[:, perm], offs[:, perm], MatchedTargets(labels[:, perm], tgt[:, perm]))[0]
    assert shuffled == pytest.approx(base, rel=1e-12)


def test_loss_gradient_finite_difference():
    from reticount.verify import grad_multibox

    assert max(grad_multibox(s) for s in range(5)) <= 1e-4


def test_whole_network_gradient_float64():
    net = build_model(TINY, 2)
    net.params = {k: v.astype(np.float64) for k, v in net.params.items()}
    s = tiny_sample()
    x = preprocess(np.stack([s.image, tiny_sample(1).image])).astype(np.float64)
    targets = build_targets([s.boxes, s.boxes[:1]], [s.labels, s.labels[:1]], net.anchors)
    assert targets.positive.any()

    def loss_of(**p):
        net.params.update(p)
        cls, loc, _, _ = net.forward(x, training=True)
        return multibox_loss(cls, loc, targets)[0]

    cls, loc, cache, _ = net.forward(x, training=True)
    _, dcls, dloc, _ = multibox_loss(cls, loc, targets)
    grads = net.backward(dcls, dloc, cache)
    names = ["block1/conv/w", "block2/bn/gamma", "head1/cls/w", "head2/loc/b"]
    inputs = {n.replace("/", "__"): net.params[n].copy() for n in names}

    def f(**kw):
        return loss_of(**{k.replace("__", "/"): v for k, v in kw.items()})

    err = finite_difference_check(f, inputs, {n.replace("/", "__"): grads[n] for n in names})
    assert err <= 1e-4


def test_targets_encode_matched_boxes():
    s = tiny_sample()
    net = build_model(TINY)
    t = build_targets([s.boxes], [s.labels], net.anchors)
    assert set(np.unique(t.labels[t.positive])) == {1, 3}
    empty = build_targets([np.zeros((0, 4))], [np.zeros(0, int)], net.anchors)
    assert not empty.positive.any()


# ---------------------------------------------------------------- class subsampling


def test_subsample_identity_map():
    rng = np.random.default_rng(0)
    head = LayerParams(rng.standard_normal((8, 3, 3, 3)), rng.standard_normal(8))
    out = subsample_class_weights(head, 4, [0, 1, 2, 3])
    np.testing.assert_array_equal(out.weights, head.weights)
    np.testing.assert_array_equal(out.bias, head.bias)


def test_subsample_from_81_classes():
    rng = np.random.default_rng(1)
    head = LayerParams(rng.standard_normal((4 * 81, 2, 3, 3)).astype(np.float32), rng.standard_normal(4 * 81).astype(np.float32))
    out = subsample_class_weights(head, 81, [0, 5, 17, 33])
    assert out.weights.shape == (16, 2, 3, 3)
    for slot in range(4):
        for j, c in enumerate([0, 5, 17, 33]):
            assert out.weights[slot * 4 + j].tobytes() == head.weights[slot * 81 + c].tobytes()
            assert out.bias[slot * 4 + j] == head.bias[slot * 81 + c]


def test_subsample_random_is_seeded_and_keeps_background():
    assert random_class_map(81, 4, 7) == random_class_map(81, 4, 7)
    m = random_class_map(81, 4, 7)
    assert m[0] == 0 and len(set(m)) == 4 and all(0 < c < 81 for c in m[1:])
    head = LayerParams(np.zeros((81, 1, 1, 1)), np.zeros(81))
    assert subsample_class_weights(head, 81, "random", 4, seed=7).weights.shape[0] == 4
    with pytest.raises(ValueError):
        subsample_class_weights(head, 81, [0, 81])


def test_subsample_network_forward_matches_slice():
    cfg81 = ModelConfig(**{**TINY.__dict__, "n_classes": 81})
    net = build_model(cfg81, 0)
    cmap = [0, 5, 17, 33]
    sub = subsample_network_classes(net, cmap)
    x = preprocess(tiny_sample().image)
    assert sub.forward(x)[0].tobytes() == np.ascontiguousarray(net.forward(x)[0][..., cmap]).tobytes()


# ---------------------------------------------------------------- inference


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000), st.floats(0.05, 0.6))
def test_forward_detect_contract(seed, thr):
    net = build_model(TINY, seed)
    dets = forward_detect(net, np.random.default_rng(seed).random((32, 32, 3)).astype(np.float32), thr)
    assert len(dets) <= 400
    for d in dets:
        assert d.confidence >= thr and 1 <= d.class_id <= 3
        assert 0 <= d.box.xmin <= d.box.xmax <= 32 and 0 <= d.box.ymin <= d.box.ymax <= 32


def test_untrained_network_at_high_threshold_detects_nothing():
    net = build_model()
    img = np.random.default_rng(0).random((300, 300, 3)).astype(np.float32)
    assert forward_detect(net, img, 0.99) == []


# ---------------------------------------------------------------- training


def test_zero_epochs_is_a_no_op(tmp_path):
    net = build_model(TINY, 0)
    before = {k: v.copy() for k, v in net.params.items()}
    _, metrics, state = train(net, [tiny_sample()], opts=TrainOptions(epochs=0), checkpoint_dir=tmp_path)
    assert metrics == [] and state.step == 0
    assert all(np.array_equal(before[k], net.params[k]) for k in before)
    assert (tmp_path / "epoch_000.ckpt").exists()


def test_training_is_deterministic_and_resumable(tmp_path):
    data = [tiny_sample(i) for i in range(4)]
    opts = TrainOptions(epochs=3, batch_size=2, augment=False)
    a, ma, _ = train(build_model(TINY, 0), data, opts=opts, checkpoint_dir=tmp_path / "a")
    b, mb, _ = train(build_model(TINY, 0), data, opts=opts)
    assert [m.train_loss for m in ma] == [m.train_loss for m in mb]
    net, state, extra = load_network(tmp_path / "a" / "epoch_001.ckpt")
    c, mc, _ = train(net, data, opts=opts, state=state, start_epoch=extra["epoch"])
    assert [m.epoch for m in mc] == [2, 3]
    assert all(a.params[k].tobytes() == c.params[k].tobytes() for k in a.params)


def test_empty_training_set_rejected():
    with pytest.raises(ValueError):
        train(build_model(TINY), [], opts=TrainOptions(epochs=1))


def test_overfit_single_sample_drives_loss_down():
    losses = overfit(build_model(TINY, 0), tiny_sample(), steps=150, hyper=AdamHyper(lr0=0.01))
    assert losses[-1] < 0.2 * losses[0]


def test_frozen_backbone_stays_fixed():
    net = build_model(TINY, 0)
    before = net.params["block1/conv/w"].copy()
    train(net, [tiny_sample()], opts=TrainOptions(epochs=1, augment=False, freeze=("block1",)))
    np.testing.assert_array_equal(net.params["block1/conv/w"], before)
    assert not np.array_equal(net.params["head1/cls/w"], build_model(TINY, 0).params["head1/cls/w"])


def test_count_regression_ablation_record():
    data = [tiny_sample(i) for i in range(3)]
    rec = run_count_regression_ablation(data, data[:1], epochs=2, batch_size=2, config=TINY)
    assert [r["epoch"] for r in rec["curve"]] == [0, 1, 2]
    assert all(np.isfinite(r["train_loss"]) for r in rec["curve"])
    assert rec["train_mean_counts"] == pytest.approx([1.0, 0.0, 1.0])
    assert rec["baseline_train"] == 0.0
