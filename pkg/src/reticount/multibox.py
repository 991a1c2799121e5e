"""Mini single-shot multibox detector: network, loss, inference, training.

The backbone is a reduced stand-in for SSD300/VGG16: five conv blocks
(3x3 conv, batch-norm, ReLU) with max-pooling after blocks 2, 4 and 5, tapped
at blocks 3, 4 and 5 (37, 18 and 9 cell grids for a 300 pixel input). Each
predictor tap gets two sibling 3x3 heads, one for class logits and one for
box offsets, laid out so that flattening (row, column, ratio) matches the
anchor order of :func:`reticount.detgeom.generate_anchors`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import checkpoint
from .detgeom import (
    CROSS_CLASS_IOU,
    DEFAULT_ANCHORS,
    NMS_IOU,
    TOP_K,
    VARIANCES,
    AnchorSpec,
    Box,
    Detection,
    decode,
    encode,
    generate_anchors,
    match_anchors,
    nms,
    suppress_cross_class,
)
from .ndtensor import (
    LayerParams,
    ShapeError,
    batchnorm2d_backward,
    batchnorm2d_forward,
    conv2d_backward,
    conv2d_forward,
    conv_output_size,
    global_avgpool_backward,
    global_avgpool_forward,
    he_uniform,
    maxpool2d_backward,
    maxpool2d_forward,
    relu_backward,
    relu_forward,
    smooth_l1,
    softmax,
    softmax_cross_entropy,
)
from .optim import AdamHyper, AdamState, NonFiniteGradient, adam_step

log = logging.getLogger(__name__)

ALPHA = 1.0
NEG_POS_RATIO = 3.0
MIN_NEGATIVES = 32
BATCH_SIZE = 8
CONF_THRESHOLD = 0.5


class NumericalFailure(FloatingPointError):
    def __init__(self, batch_id: str, detail: str = "loss is not finite"):
        super().__init__(f"{detail} at {batch_id}")
        self.batch_id = batch_id


@dataclass(frozen=True)
class BlockSpec:
    channels: int
    stride: int = 1
    pool: bool = False


DEFAULT_BLOCKS = (
    BlockSpec(16, 2),
    BlockSpec(32, 2, pool=True),
    BlockSpec(64),
    BlockSpec(64, pool=True),
    BlockSpec(96, pool=True),
)


@dataclass(frozen=True)
class ModelConfig:
    input_side: int = 300
    in_channels: int = 3
    blocks: tuple[BlockSpec, ...] = DEFAULT_BLOCKS
    taps: tuple[int, ...] = (3, 4, 5)  # 1-based block indices; tapped after the block's pool
    n_classes: int = 4
    anchors: AnchorSpec = DEFAULT_ANCHORS

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("n_classes must be at least 2 (background + one class)")
        if len(self.taps) != len(self.anchors.maps):
            raise ValueError(f"{len(self.taps)} predictor taps but {len(self.anchors.maps)} anchor maps")
        if any(not 1 <= t <= len(self.blocks) for t in self.taps):
            raise ValueError(f"tap indices {self.taps} outside 1..{len(self.blocks)}")

    def block_sizes(self) -> list[int]:
        size, out = self.input_side, []
        for b in self.blocks:
            size = conv_output_size(size, 3, b.stride, 1)
            if b.pool:
                size = (size - 2) // 2 + 1
            out.append(size)
        return out

    def to_dict(self) -> dict:
        return {
            "input_side": self.input_side,
            "in_channels": self.in_channels,
            "blocks": [[b.channels, b.stride, int(b.pool)] for b in self.blocks],
            "taps": list(self.taps),
            "n_classes": self.n_classes,
            "anchors": self.anchors.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            input_side=int(d["input_side"]),
            in_channels=int(d["in_channels"]),
            blocks=tuple(BlockSpec(int(c), int(s), bool(p)) for c, s, p in d["blocks"]),
            taps=tuple(int(t) for t in d["taps"]),
            n_classes=int(d["n_classes"]),
            anchors=AnchorSpec.from_dict(d["anchors"]),
        )


def preprocess(images: np.ndarray) -> np.ndarray:
    """(N, H, W, 3) or (H, W, 3) rasters in [0, 1] -> NCHW float32 centered at 0."""
    x = np.asarray(images, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    return np.ascontiguousarray((x.transpose(0, 3, 1, 2) - 0.5) * 2.0)


# ---------------------------------------------------------------------------
# backbone shared by the detector and the count-regression ablation
# ---------------------------------------------------------------------------


def _init_backbone(config: ModelConfig, rng: np.random.Generator, params: dict, bn: dict) -> None:
    cin = config.in_channels
    for i, b in enumerate(config.blocks, start=1):
        params[f"block{i}/conv/w"] = he_uniform(rng, (b.channels, cin, 3, 3))
        params[f"block{i}/conv/b"] = np.zeros(b.channels, np.float32)
        params[f"block{i}/bn/gamma"] = np.ones(b.channels, np.float32)
        params[f"block{i}/bn/beta"] = np.zeros(b.channels, np.float32)
        bn[f"block{i}/bn"] = (np.zeros(b.channels, np.float32), np.ones(b.channels, np.float32), 0)
        cin = b.channels


def _backbone_forward(config, params, bn, x, training, depth):
    feats, caches, bn_new = [], [], {}
    h = x
    for i, b in enumerate(config.blocks[:depth], start=1):
        h, c_conv = conv2d_forward(h, params[f"block{i}/conv/w"], params[f"block{i}/conv/b"], b.stride, 1)
        mean, var, count = bn[f"block{i}/bn"]
        lp = LayerParams(params[f"block{i}/bn/gamma"], params[f"block{i}/bn/beta"], mean, var, num_updates=count)
        h, c_bn, running = batchnorm2d_forward(h, lp, training)
        bn_new[f"block{i}/bn"] = running
        h, c_relu = relu_forward(h)
        c_pool = None
        if b.pool:
            h, c_pool = maxpool2d_forward(h, 2, 2)
        caches.append((c_conv, c_bn, c_relu, c_pool))
        feats.append(h)
    return feats, caches, bn_new


def _backbone_backward(config, caches, dfeats, grads):
    """``dfeats[i]`` is the gradient arriving at block i+1's output (or None)."""
    dh = None
    for i in range(len(caches), 0, -1):
        extra = dfeats[i - 1]
        if extra is not None:
            dh = extra if dh is None else dh + extra
        if dh is None:
            continue
        c_conv, c_bn, c_relu, c_pool = caches[i - 1]
        if c_pool is not None:
            dh = maxpool2d_backward(dh, c_pool)
        dh = relu_backward(dh, c_relu)
        dh, dgamma, dbeta = batchnorm2d_backward(dh, c_bn)
        grads[f"block{i}/bn/gamma"] = dgamma
        grads[f"block{i}/bn/beta"] = dbeta
        dh, dw, db = conv2d_backward(dh, c_conv)
        grads[f"block{i}/conv/w"] = dw
        grads[f"block{i}/conv/b"] = db
    return dh


# ---------------------------------------------------------------------------
# detector network
# ---------------------------------------------------------------------------


@dataclass
class ForwardCache:
    backbone: list
    heads: list
    batch: int


@dataclass
class Network:
    config: ModelConfig
    params: dict[str, np.ndarray]
    bn: dict[str, tuple[np.ndarray, np.ndarray, int]]
    anchors: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.anchors is None:
            self.anchors = generate_anchors(self.config.anchors, self.config.input_side)

    @property
    def n_anchors(self) -> int:
        return len(self.anchors)

    def forward(self, x: np.ndarray, training: bool = False):
        """Returns ``(class_logits (N, A, C), offsets (N, A, 4), cache, bn_updates)``."""
        cfg = self.config
        depth = max(cfg.taps)
        feats, bcache, bn_new = _backbone_forward(cfg, self.params, self.bn, x, training, depth)
        cls_chunks, loc_chunks, hcache = [], [], []
        n = x.shape[0]
        for k, (tap, fm) in enumerate(zip(cfg.taps, cfg.anchors.maps), start=1):
            f = feats[tap - 1]
            c, cc = conv2d_forward(f, self.params[f"head{k}/cls/w"], self.params[f"head{k}/cls/b"], 1, 1, per_channel=True)
            l, lc = conv2d_forward(f, self.params[f"head{k}/loc/w"], self.params[f"head{k}/loc/b"], 1, 1)
            cls_chunks.append(c.transpose(0, 2, 3, 1).reshape(n, -1, cfg.n_classes))
            loc_chunks.append(l.transpose(0, 2, 3, 1).reshape(n, -1, 4))
            hcache.append((cc, lc, c.shape, l.shape))
        cls_logits = np.concatenate(cls_chunks, axis=1)
        offsets = np.concatenate(loc_chunks, axis=1)
        return cls_logits, offsets, ForwardCache(bcache, hcache, n), bn_new

    def backward(self, dcls: np.ndarray, dloc: np.ndarray, cache: ForwardCache) -> dict[str, np.ndarray]:
        cfg = self.config
        grads: dict[str, np.ndarray] = {}
        dfeats: list = [None] * max(cfg.taps)
        start = 0
        for k, (tap, (cc, lc, cshape, lshape)) in enumerate(zip(cfg.taps, cache.heads), start=1):
            n, _, hh, ww = cshape
            count = hh * ww * (cshape[1] // cfg.n_classes)
            dc = dcls[:, start : start + count].reshape(n, hh, ww, -1).transpose(0, 3, 1, 2)
            dl = dloc[:, start : start + count].reshape(n, hh, ww, -1).transpose(0, 3, 1, 2)
            start += count
            dfc, grads[f"head{k}/cls/w"], grads[f"head{k}/cls/b"] = conv2d_backward(np.ascontiguousarray(dc), cc)
            dfl, grads[f"head{k}/loc/w"], grads[f"head{k}/loc/b"] = conv2d_backward(np.ascontiguousarray(dl), lc)
            d = dfc + dfl
            dfeats[tap - 1] = d if dfeats[tap - 1] is None else dfeats[tap - 1] + d
        _backbone_backward(cfg, cache.backbone, dfeats, grads)
        return grads

    def state_entries(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in self.params.items()}
        for k, (m, v, count) in self.bn.items():
            out[f"bn/{k}/mean"] = m
            out[f"bn/{k}/var"] = v
            out[f"bn/{k}/count"] = np.array([count], dtype=np.int64)
        out["meta/model_config"] = checkpoint.encode_json(self.config.to_dict())
        return out

    def shape_table(self) -> dict[str, tuple]:
        return {k: tuple(v.shape) for k, v in self.state_entries().items() if not k.startswith("meta/")}


def build_model(config: ModelConfig = ModelConfig(), seed: int = 0) -> Network:
    sizes = config.block_sizes()
    for tap, fm in zip(config.taps, config.anchors.maps):
        if sizes[tap - 1] != fm.grid:
            raise ShapeError(f"tap at block {tap} has a {sizes[tap - 1]}x{sizes[tap - 1]} map but anchor grid is {fm.grid}")
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    bn: dict = {}
    _init_backbone(config, rng, params, bn)
    for k, (tap, fm) in enumerate(zip(config.taps, config.anchors.maps), start=1):
        cin = config.blocks[tap - 1].channels
        na = len(fm.ratios)
        params[f"head{k}/cls/w"] = he_uniform(rng, (na * config.n_classes, cin, 3, 3))
        params[f"head{k}/cls/b"] = np.zeros(na * config.n_classes, np.float32)
        params[f"head{k}/loc/w"] = he_uniform(rng, (na * 4, cin, 3, 3))
        params[f"head{k}/loc/b"] = np.zeros(na * 4, np.float32)
    return Network(config, params, bn)


def save_network(path, network: Network, state: AdamState | None = None, extra: dict | None = None) -> None:
    entries = network.state_entries()
    if state is not None:
        entries.update(state.to_entries())
    if extra:
        entries["meta/extra"] = checkpoint.encode_json(extra)
    checkpoint.save(path, entries)


def shape_mismatches(network: Network, entries: dict) -> list[str]:
    want = network.shape_table()
    have = {k: tuple(v.shape) for k, v in entries.items() if k.startswith(("param/", "bn/"))}
    diff = []
    for k in sorted(set(want) | set(have)):
        if want.get(k) != have.get(k):
            diff.append(f"{k}: model {want.get(k, 'absent')} vs checkpoint {have.get(k, 'absent')}")
    return diff


def load_network(path, config: ModelConfig | None = None):
    """Load ``(network, adam_state_or_None, extra_metadata)``.

    When ``config`` is given the checkpoint must match its shapes exactly,
    otherwise a :class:`ShapeError` listing every difference is raised.
    """
    entries = checkpoint.load(path)
    if config is None:
        config = ModelConfig.from_dict(checkpoint.decode_json(entries["meta/model_config"]))
    net = build_model(config, 0)
    diff = shape_mismatches(net, entries)
    if diff:
        raise ShapeError("checkpoint does not match model:\n  " + "\n  ".join(diff))
    net.params = {k: entries[f"param/{k}"] for k in net.params}
    net.bn = {k: (entries[f"bn/{k}/mean"], entries[f"bn/{k}/var"], int(entries[f"bn/{k}/count"][0])) for k in net.bn}
    state = AdamState.from_entries(entries) if "adam/step" in entries else None
    extra = checkpoint.decode_json(entries["meta/extra"]) if "meta/extra" in entries else {}
    return net, state, extra


# ---------------------------------------------------------------------------
# targets and loss
# ---------------------------------------------------------------------------


@dataclass
class MatchedTargets:
    labels: np.ndarray  # (N, A) int
    offsets: np.ndarray  # (N, A, 4); meaningful only where labels > 0

    @property
    def positive(self) -> np.ndarray:
        return self.labels > 0


def build_targets(
    boxes_per_image: Sequence[np.ndarray],
    labels_per_image: Sequence[np.ndarray],
    anchors: np.ndarray,
    threshold: float = 0.5,
    variances=VARIANCES,
) -> MatchedTargets:
    n, a = len(boxes_per_image), len(anchors)
    labels = np.zeros((n, a), dtype=np.int64)
    offsets = np.zeros((n, a, 4), dtype=np.float32)
    for i, (boxes, labs) in enumerate(zip(boxes_per_image, labels_per_image)):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, labs = boxes[ok], np.asarray(labs)[ok]
        lab, idx = match_anchors(boxes, labs, anchors, threshold)
        labels[i] = lab
        pos = idx >= 0
        if pos.any():
            offsets[i, pos] = encode(boxes[idx[pos]], anchors[pos], variances)
    return MatchedTargets(labels, offsets)


def select_hard_negatives(ce: np.ndarray, labels: np.ndarray, neg_pos_ratio: float = NEG_POS_RATIO, min_negatives: int = MIN_NEGATIVES) -> np.ndarray:
    """Per-image mask of the highest-loss background anchors.

    Ties in loss go to the lower anchor index.
    """
    mask = np.zeros(labels.shape, dtype=bool)
    for i in range(labels.shape[0]):
        neg = labels[i] == 0
        n_pos = int((~neg).sum())
        n_neg_avail = int(neg.sum())
        want = int(neg_pos_ratio * n_pos) if n_pos > 0 else min_negatives
        k = min(want, n_neg_avail)
        if k <= 0:
            continue
        score = np.where(neg, ce[i], -np.inf)
        order = np.argsort(-score, kind="stable")
        mask[i, order[:k]] = True
    return mask


def multibox_loss(
    class_logits: np.ndarray,
    offset_preds: np.ndarray,
    targets: MatchedTargets,
    alpha: float = ALPHA,
    neg_pos_ratio: float = NEG_POS_RATIO,
    min_negatives: int = MIN_NEGATIVES,
):
    """SSD loss ``(L_conf + alpha * L_loc) / max(N_pos, 1)``.

    Returns ``(loss, dlogits, doffsets, parts)`` where ``parts`` holds the
    unnormalized confidence and localization terms.
    """
    labels = targets.labels
    ce, dlogits = softmax_cross_entropy(class_logits, labels, axis=-1)
    pos = labels > 0
    conf_mask = pos | select_hard_negatives(ce, labels, neg_pos_ratio, min_negatives)
    n_pos = int(pos.sum())
    denom = float(max(n_pos, 1))
    l_conf = float((ce * conf_mask).sum())
    if n_pos:
        l_loc, dloc_pos = smooth_l1(offset_preds[pos], targets.offsets[pos].astype(offset_preds.dtype))
    else:
        l_loc, dloc_pos = 0.0, np.zeros((0, 4), offset_preds.dtype)
    loss = (l_conf + alpha * l_loc) / denom
    dlogits = (dlogits * conf_mask[..., None] / denom).astype(class_logits.dtype)
    doffsets = np.zeros_like(offset_preds)
    doffsets[pos] = alpha * dloc_pos / denom
    return loss, dlogits, doffsets, {"conf": l_conf, "loc": l_loc, "n_pos": n_pos}


# ---------------------------------------------------------------------------
# pretrained-head class subsampling
# ---------------------------------------------------------------------------


def random_class_map(source_classes: int, dest_classes: int, seed: int) -> list[int]:
    """Background (0) plus a seeded, sorted random choice of source classes."""
    rng = np.random.default_rng(seed)
    picked = np.sort(rng.choice(np.arange(1, source_classes), size=dest_classes - 1, replace=False))
    return [0] + picked.tolist()


def subsample_class_weights(
    head: LayerParams,
    source_classes: int,
    class_index_map: Sequence[int] | str,
    dest_classes: int | None = None,
    seed: int = 0,
) -> LayerParams:
    """Keep the per-anchor channel groups of the selected classes.

    ``head.weights`` has ``k * source_classes`` output channels ordered
    (anchor slot, class). Pass ``"random"`` with ``dest_classes`` for a
    seeded random selection.
    """
    if isinstance(class_index_map, str):
        if class_index_map != "random" or dest_classes is None:
            raise ValueError("use 'random' together with dest_classes")
        class_index_map = random_class_map(source_classes, dest_classes, seed)
    cmap = np.asarray(class_index_map, dtype=np.int64)
    if np.any(cmap < 0) or np.any(cmap >= source_classes):
        raise ValueError(f"class index map {cmap.tolist()} has entries outside 0..{source_classes - 1}")
    out_ch = head.weights.shape[0]
    if out_ch % source_classes:
        raise ShapeError(f"{out_ch} output channels is not a multiple of {source_classes} classes")
    k = out_ch // source_classes
    sel = (np.arange(k)[:, None] * source_classes + cmap[None, :]).reshape(-1)
    return replace(head, weights=head.weights[sel].copy(), bias=head.bias[sel].copy())


def subsample_network_classes(network: Network, class_index_map: Sequence[int]) -> Network:
    """Copy of ``network`` whose class heads predict only the mapped classes."""
    cfg = replace(network.config, n_classes=len(class_index_map))
    params = dict(network.params)
    for k in range(1, len(cfg.taps) + 1):
        lp = LayerParams(params[f"head{k}/cls/w"], params[f"head{k}/cls/b"])
        sub = subsample_class_weights(lp, network.config.n_classes, class_index_map)
        params[f"head{k}/cls/w"], params[f"head{k}/cls/b"] = sub.weights, sub.bias
    return Network(cfg, params, dict(network.bn), network.anchors)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def decode_detections(
    class_logits: np.ndarray,
    offsets: np.ndarray,
    anchors: np.ndarray,
    image_side: int,
    conf_threshold: float = CONF_THRESHOLD,
    nms_iou: float = NMS_IOU,
    top_k: int = TOP_K,
    cross_class_iou: float = CROSS_CLASS_IOU,
) -> list[Detection]:
    probs = softmax(class_logits.astype(np.float64), axis=-1)
    boxes = decode(offsets, anchors, image_side=image_side)
    dets = []
    for cls in range(1, probs.shape[-1]):
        idx = np.flatnonzero(probs[:, cls] >= conf_threshold)
        for a in idx:
            conf = float(min(probs[a, cls], 1.0))
            dets.append(Detection(Box.from_array(boxes[a]), cls, conf, int(a)))
    return suppress_cross_class(nms(dets, nms_iou, top_k), cross_class_iou)


def detect_batch(
    network: Network,
    images: Sequence[np.ndarray],
    conf_threshold: float = CONF_THRESHOLD,
    nms_iou: float = NMS_IOU,
    top_k: int = TOP_K,
    batch_size: int = BATCH_SIZE,
    cross_class_iou: float = CROSS_CLASS_IOU,
) -> list[list[Detection]]:
    out = []
    for s in range(0, len(images), batch_size):
        x = preprocess(np.stack(images[s : s + batch_size]))
        cls, loc, _, _ = network.forward(x, training=False)
        for i in range(x.shape[0]):
            out.append(decode_detections(cls[i], loc[i], network.anchors, network.config.input_side, conf_threshold, nms_iou, top_k, cross_class_iou))
    return out


def forward_detect(
    network: Network,
    image: np.ndarray,
    conf_threshold: float = CONF_THRESHOLD,
    nms_iou: float = NMS_IOU,
    top_k: int = TOP_K,
    cross_class_iou: float = CROSS_CLASS_IOU,
) -> list[Detection]:
    return detect_batch(network, [image], conf_threshold, nms_iou, top_k, cross_class_iou=cross_class_iou)[0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


@dataclass
class TrainOptions:
    epochs: int = 40
    batch_size: int = BATCH_SIZE
    seed: int = 0
    augment: bool = True
    conf_threshold: float = CONF_THRESHOLD
    nms_iou: float = NMS_IOU
    top_k: int = TOP_K
    cross_class_iou: float = CROSS_CLASS_IOU
    freeze: tuple[str, ...] = ()
    alpha: float = ALPHA
    neg_pos_ratio: float = NEG_POS_RATIO


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float | None
    val_count_accuracy: tuple[float | None, float | None, float | None]

    def csv_row(self) -> list[str]:
        def f(v):
            return "undefined" if v is None else f"{v:.6f}"

        return [str(self.epoch), f(self.train_loss), f(self.val_loss), *(f(v) for v in self.val_count_accuracy)]


METRICS_HEADER = ["epoch", "train_loss", "val_loss", "val_count_accuracy_aggregate", "val_count_accuracy_punctate", "val_count_accuracy_erythrocyte"]


def _frozen(name: str, freeze: Iterable[str]) -> bool:
    return any(name == f or name.startswith(f.rstrip("/") + "/") for f in freeze)


def train_step(network: Network, state: AdamState, images, boxes, labels, hyper: AdamHyper, opts: TrainOptions, batch_id: str, epoch: int = 0):
    """One forward/backward/Adam update; returns ``(loss, new_state)`` and updates ``network`` in place."""
    x = preprocess(np.stack(images))
    targets = build_targets(boxes, labels, network.anchors)
    cls, loc, cache, bn_new = network.forward(x, training=True)
    loss, dcls, dloc, _ = multibox_loss(cls, loc, targets, opts.alpha, opts.neg_pos_ratio)
    if not np.isfinite(loss):
        raise NumericalFailure(batch_id)
    grads = network.backward(dcls, dloc, cache)
    grads = {k: g for k, g in grads.items() if not _frozen(k, opts.freeze)}
    try:
        network.params, state = adam_step(network.params, grads, state, hyper, epoch)
    except NonFiniteGradient as exc:
        raise NumericalFailure(batch_id, str(exc)) from None
    network.bn.update(bn_new)
    return loss, state


def evaluate_loss(network: Network, samples, batch_size: int = BATCH_SIZE, opts: TrainOptions | None = None) -> float:
    opts = opts or TrainOptions()
    total = 0.0
    for s in range(0, len(samples), batch_size):
        chunk = samples[s : s + batch_size]
        x = preprocess(np.stack([c.image for c in chunk]))
        targets = build_targets([c.boxes for c in chunk], [c.labels for c in chunk], network.anchors)
        cls, loc, _, _ = network.forward(x, training=False)
        loss, _, _, _ = multibox_loss(cls, loc, targets, opts.alpha, opts.neg_pos_ratio)
        total += loss * len(chunk)
    return total / max(len(samples), 1)


def count_accuracy(network: Network, samples, opts: TrainOptions) -> tuple:
    dets = detect_batch(network, [s.image for s in samples], opts.conf_threshold, opts.nms_iou, opts.top_k, opts.batch_size, opts.cross_class_iou)
    pred = np.zeros(3)
    truth = np.zeros(3)
    for s, ds in zip(samples, dets):
        for d in ds:
            pred[d.class_id - 1] += 1
        truth += s.counts()
    return tuple(float(p / t) if t > 0 else None for p, t in zip(pred, truth))


def train(
    network: Network,
    train_set,
    hyper: AdamHyper = AdamHyper(),
    opts: TrainOptions = TrainOptions(),
    val_set=None,
    checkpoint_dir: str | Path | None = None,
    state: AdamState | None = None,
    start_epoch: int = 0,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
):
    """Fit ``network`` in place; returns ``(network, metrics, state)``.

    Epoch ``e`` (1-based) shuffles and augments with a generator seeded by
    ``(seed, e)``, so resuming from a checkpoint written after epoch ``k``
    reproduces an uninterrupted run exactly.
    """
    from .datapipe.augment import augment as augment_image

    if not train_set:
        raise ValueError("training set is empty")
    state = state or AdamState.zeros_like(network.params)
    metrics: list[EpochMetrics] = []
    ckdir = Path(checkpoint_dir) if checkpoint_dir else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
        if start_epoch == 0:
            save_network(ckdir / "epoch_000.ckpt", network, state, {"epoch": 0})
    for epoch in range(start_epoch + 1, opts.epochs + 1):
        rng = np.random.default_rng([opts.seed, epoch])
        order = rng.permutation(len(train_set))
        losses = []
        for b, s in enumerate(range(0, len(order), opts.batch_size)):
            imgs, bxs, lbs = [], [], []
            for j in order[s : s + opts.batch_size]:
                smp = train_set[j]
                if opts.augment:
                    img, bx, keep = augment_image(smp.image, smp.boxes, rng)
                    imgs.append(img)
                    bxs.append(bx)
                    lbs.append(smp.labels[keep])
                else:
                    imgs.append(smp.image)
                    bxs.append(smp.boxes)
                    lbs.append(smp.labels)
            loss, state = train_step(network, state, imgs, bxs, lbs, hyper, opts, f"epoch {epoch} batch {b}", epoch - 1)
            losses.append(loss)
        val_loss = evaluate_loss(network, val_set, opts.batch_size, opts) if val_set else None
        acc = count_accuracy(network, val_set, opts) if val_set else (None, None, None)
        m = EpochMetrics(epoch, float(np.mean(losses)), val_loss, acc)
        metrics.append(m)
        log.info("epoch %d train_loss %.4f val_loss %s", epoch, m.train_loss, val_loss)
        if ckdir is not None:
            save_network(ckdir / f"epoch_{epoch:03d}.ckpt", network, state, {"epoch": epoch})
        if on_epoch is not None:
            on_epoch(m)
    return network, metrics, state


def overfit(network: Network, sample, steps: int = 300, hyper: AdamHyper = AdamHyper()) -> list[float]:
    """Repeatedly fit a single un-augmented sample; returns the loss per step."""
    state = AdamState.zeros_like(network.params)
    opts = TrainOptions(augment=False)
    losses = []
    for t in range(steps):
        loss, state = train_step(network, state, [sample.image], [sample.boxes], [sample.labels], hyper, opts, f"step {t}")
        losses.append(loss)
    return losses


# ---------------------------------------------------------------------------
# count-regression ablation
# ---------------------------------------------------------------------------


@dataclass
class CountRegressor:
    """Backbone plus a 3-channel conv on the deepest map, globally averaged."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    bn: dict

    def forward(self, x, training=False):
        feats, bcache, bn_new = _backbone_forward(self.config, self.params, self.bn, x, training, len(self.config.blocks))
        h, hc = conv2d_forward(feats[-1], self.params["count/w"], self.params["count/b"], 1, 1)
        y, gshape = global_avgpool_forward(h)
        return y, (bcache, hc, gshape), bn_new

    def backward(self, dy, cache):
        bcache, hc, gshape = cache
        grads = {}
        dh = global_avgpool_backward(dy, gshape)
        dfeat, grads["count/w"], grads["count/b"] = conv2d_backward(np.ascontiguousarray(dh), hc)
        dfeats = [None] * len(self.config.blocks)
        dfeats[-1] = dfeat
        _backbone_backward(self.config, bcache, dfeats, grads)
        return grads


def build_count_regressor(config: ModelConfig = ModelConfig(), seed: int = 0) -> CountRegressor:
    rng = np.random.default_rng(seed)
    params, bn = {}, {}
    _init_backbone(config, rng, params, bn)
    cin = config.blocks[-1].channels
    params["count/w"] = he_uniform(rng, (3, cin, 3, 3))
    params["count/b"] = np.zeros(3, np.float32)
    return CountRegressor(config, params, bn)


def _count_mse(model: CountRegressor, samples, batch_size: int) -> float:
    if not samples:
        return float("nan")
    total = 0.0
    for s in range(0, len(samples), batch_size):
        chunk = samples[s : s + batch_size]
        y, _, _ = model.forward(preprocess(np.stack([c.image for c in chunk])), False)
        t = np.array([c.counts() for c in chunk], dtype=np.float64)
        total += float(((y - t) ** 2).mean(axis=1).sum())
    return total / len(samples)


def run_count_regression_ablation(
    train_set,
    val_set,
    epochs: int,
    hyper: AdamHyper = AdamHyper(),
    seed: int = 0,
    batch_size: int = BATCH_SIZE,
    config: ModelConfig = ModelConfig(),
) -> dict:
    """Directly regress per-class counts; records the learning curve.

    The record holds ``curve`` (``epochs + 1`` rows of epoch/train/val MSE,
    row 0 before any update) and the constant-prediction baselines, i.e. the
    MSE of always predicting the training-set mean counts.
    """
    model = build_count_regressor(config, seed)
    state = AdamState.zeros_like(model.params)
    y_train = np.array([s.counts() for s in train_set], dtype=np.float64)
    mean = y_train.mean(axis=0)
    base_train = float(((y_train - mean) ** 2).mean())
    y_val = np.array([s.counts() for s in val_set], dtype=np.float64).reshape(-1, 3)
    base_val = float(((y_val - mean) ** 2).mean()) if len(y_val) else float("nan")
    curve = [{"epoch": 0, "train_loss": _count_mse(model, train_set, batch_size), "val_loss": _count_mse(model, val_set, batch_size)}]
    for epoch in range(1, epochs + 1):
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(train_set))
        for s in range(0, len(order), batch_size):
            chunk = [train_set[j] for j in order[s : s + batch_size]]
            x = preprocess(np.stack([c.image for c in chunk]))
            t = np.array([c.counts() for c in chunk], dtype=np.float32)
            y, cache, bn_new = model.forward(x, True)
            dy = (2.0 * (y - t) / y.size).astype(np.float32)
            grads = model.backward(dy, cache)
            model.params, state = adam_step(model.params, grads, state, hyper, epoch - 1)
            model.bn.update(bn_new)
        curve.append({"epoch": epoch, "train_loss": _count_mse(model, train_set, batch_size), "val_loss": _count_mse(model, val_set, batch_size)})
    return {"curve": curve, "baseline_train": base_train, "baseline_val": base_val, "train_mean_counts": mean.tolist()}
