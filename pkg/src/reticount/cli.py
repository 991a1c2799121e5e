"""``reticount`` command line: synth, train, count, eval, ablation, verify.

Settings resolve in this order (first wins): explicit command-line flag,
``RETICOUNT_OUTPUT_DIR`` (output directory only), ``--config`` file, built-in
default. The config file holds ``key = value`` lines whose keys are flag
names with or without the leading dashes (``epochs = 40``,
``conf-threshold = 0.6``); ``#`` starts a comment.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure (a
non-finite loss or a failing verification property).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3
OUTPUT_ENV = "RETICOUNT_OUTPUT_DIR"

log = logging.getLogger("reticount")


class UsageError(Exception):
    """Bad arguments or unreadable input; maps to exit code 2."""


class NumericError(Exception):
    """Non-finite training state or failed verification; maps to exit code 3."""


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Resolved settings shared by train, count, eval and ablation."""

    data: Path | None = None
    val_data: Path | None = None
    checkpoint: Path | None = None
    out: Path = Path("reticount_out")
    train_fraction: float = 1.0
    epochs: int = 40
    batch_size: int = 8
    lr: float = 0.001
    decay: float = 0.0005
    decay_unit: str = "step"
    augment: bool = True
    seed: int = 0
    conf_threshold: float = 0.5
    nms_iou: float = 0.45
    cross_class_iou: float = 0.45
    top_k: int = 400

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        kw = {k: getattr(args, k) for k in cls.__dataclass_fields__ if hasattr(args, k)}
        for k in ("data", "val_data", "checkpoint", "out"):
            if kw.get(k) is not None:
                kw[k] = Path(kw[k])
        return cls(**kw)

    def validate_paths(self) -> None:
        for name in ("data", "val_data"):
            p = getattr(self, name)
            if p is not None and not p.is_dir():
                raise UsageError(f"--{name.replace('_', '-')}: {p} is not a directory")
        if self.checkpoint is not None and not self.checkpoint.is_file():
            raise UsageError(f"--checkpoint: {self.checkpoint} does not exist")
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"cannot create output directory {self.out}: {exc.strerror}") from exc
        if not os.access(self.out, os.W_OK):
            raise UsageError(f"output directory {self.out} is not writable")

    def hyper(self):
        from .optim import AdamHyper

        return AdamHyper(lr0=self.lr, decay=self.decay, decay_unit=self.decay_unit)


def read_config_file(path: str | Path) -> dict[str, str]:
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc.strerror}") from exc
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.lstrip("-").replace("-", "_")] = value
    return values


def _apply_config(parser: argparse.ArgumentParser, sub: argparse.ArgumentParser, argv: list[str], args: argparse.Namespace):
    """Re-parse with config-file values installed as defaults."""
    values = read_config_file(args.config)
    known = {opt.lstrip("-").replace("-", "_"): a for a in sub._actions for opt in a.option_strings}
    defaults = {}
    for key, value in values.items():
        action = known.get(key)
        if action is None or key in ("help", "config", "verbose"):
            raise UsageError(f"{args.config}: unknown setting {key!r} for '{args.command}'")
        key = action.dest
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            flag = value.lower() in ("1", "true", "yes", "on")
            defaults[key] = flag if isinstance(action, argparse._StoreTrueAction) else not flag
        elif action.type is not None:
            try:
                defaults[key] = action.type(value)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"{args.config}: bad value for {key}: {value!r}") from exc
        else:
            defaults[key] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _ratio(text: str) -> tuple[int, int, int]:
    parts = text.split(":")
    try:
        vals = tuple(int(p) for p in parts)
    except ValueError:
        vals = ()
    if len(vals) != 3 or min(vals) < 0 or sum(vals) == 0:
        raise argparse.ArgumentTypeError(f"ratio must look like 1:1:2, got {text!r}")
    return vals


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {text}")
    return v


def _unit_interval(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must lie in [0, 1], got {text}")
    return v


class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    def _get_help_string(self, action):
        # a boolean switch's default says nothing useful
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            return action.help
        return super()._get_help_string(action)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value settings file; command-line flags take precedence")
    p.add_argument("--out", default="reticount_out", help=f"output directory (overridden by ${OUTPUT_ENV})")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_thresholds(p: argparse.ArgumentParser) -> None:
    # none of these are published; the defaults are the usual single-shot detector settings
    p.add_argument("--conf-threshold", type=_unit_interval, default=0.5, help="minimum class confidence kept")
    p.add_argument("--nms-iou", type=_unit_interval, default=0.45, help="per-class NMS IoU threshold")
    p.add_argument(
        "--cross-class-iou",
        type=_unit_interval,
        default=0.45,
        help="after NMS, drop a detection overlapping a more confident one of another class above this IoU (1 disables)",
    )
    p.add_argument("--top-k", type=_positive_int, default=400, help="detections kept per image after NMS")


def _add_training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory with images/ and annotations/")
    p.add_argument("--val-data", help="separate validation dataset directory")
    p.add_argument(
        "--train-fraction",
        type=_fraction,
        default=1.0,
        help="when below 1 and no --val-data, hold out the rest of --data for validation (published split: 800/1046 = 0.765)",
    )
    p.add_argument("--epochs", type=_nonneg_int, default=40, help="training epochs (published value: 40)")
    p.add_argument("--batch-size", type=_positive_int, default=8, help="images per step (published value: 8)")
    p.add_argument("--lr", type=float, default=0.001, help="initial Adam learning rate (published value: 0.001)")
    p.add_argument("--decay", type=float, default=0.0005, help="learning-rate decay, lr = lr0/(1 + decay*t) (published value: 0.0005)")
    p.add_argument("--decay-unit", choices=("step", "epoch"), default="step", help="what t counts in the decay schedule")
    p.add_argument("--no-augment", dest="augment", action="store_false", help="disable flip/translate/scale/brightness augmentation (on by default)")
    p.add_argument("--seed", type=int, default=0, help="seed for initialization, shuffling, augmentation and splits")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reticount",
        description="Count aggregate and punctate reticulocytes and erythrocytes in stained smear images.",
        formatter_class=_Formatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic annotated smear dataset", formatter_class=_Formatter)
    _add_common(p)
    p.add_argument("--images", type=int, default=240, help="number of images (>= 1)")
    p.add_argument("--ratio", type=_ratio, default=(1, 1, 2), help="aggregate:punctate:erythrocyte totals (published value: 1:1:2)")
    p.add_argument("--seed", type=int, default=0, help="dataset seed, recorded in manifest.json")
    p.add_argument("--cells-min", type=_positive_int, default=6, help="fewest cells per image")
    p.add_argument("--cells-max", type=_positive_int, default=10, help="most cells per image")
    p.add_argument("--heinz-frac", type=_unit_interval, default=0.1, help="share of all cells drawn as Heinz-body distractors")
    p.add_argument("--aggregate-total", type=_nonneg_int, help="pin the dataset-wide aggregate count")
    p.add_argument("--preset", choices=("microscope", "smartphone"), default="microscope", help="imaging conditions")
    p.add_argument("--prefix", default="smear", help="file name prefix")

    p = sub.add_parser("train", help="train the detector", formatter_class=_Formatter)
    _add_common(p)
    _add_training(p)
    _add_thresholds(p)
    p.add_argument("--resume", action="store_true", help="continue from the newest checkpoint in OUT/checkpoints")
    p.add_argument("--init", help="initialize weights from this checkpoint (for example a subsampled head)")
    p.add_argument("--freeze", default="", help="comma-separated parameter-name prefixes to keep fixed, e.g. block1,block2")

    p = sub.add_parser("count", help="detect and count cells in a directory of images", formatter_class=_Formatter)
    _add_common(p)
    _add_thresholds(p)
    p.add_argument("--checkpoint", required=True, help="trained model checkpoint")
    p.add_argument("--images", required=True, help="directory of PNG/PPM images (any size, standardized to 300x300)")
    p.add_argument("--overlays", action="store_true", help="also write per-image overlay rasters and figures")
    p.add_argument("--truth", help="dataset directory whose annotations are drawn dashed on overlays")
    p.add_argument("--channels", help="comma-separated backbone channels overriding the checkpoint's configuration")
    p.add_argument("--n-classes", type=_positive_int, help="class count (with background) overriding the checkpoint's configuration")

    p = sub.add_parser("eval", help="compare predicted counts and boxes with ground truth", formatter_class=_Formatter)
    _add_common(p)
    _add_thresholds(p)
    p.add_argument("--data", required=True, help="annotated dataset directory")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="trained model checkpoint to run on the dataset images")
    src.add_argument("--detections", help="detections file written by 'count'")
    p.add_argument("--match-iou", type=_unit_interval, default=0.5, help="IoU for a detection to match a ground-truth box")

    p = sub.add_parser("ablation", help="train the direct count-regression baseline", formatter_class=_Formatter)
    _add_common(p)
    _add_training(p)

    p = sub.add_parser("verify", help="run oracle and property suites", formatter_class=_Formatter)
    p.add_argument("suite", choices=("grad", "geom", "aug", "all"), help="which suite to run")
    p.add_argument("--config", help=argparse.SUPPRESS)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def parse(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        sub = parser._subparsers._group_actions[0].choices[args.command]
        args = _apply_config(parser, sub, argv, args)
    if hasattr(args, "out") and OUTPUT_ENV in os.environ and not _flag_given(argv, "--out"):
        args.out = os.environ[OUTPUT_ENV]
    return args


def _flag_given(argv: list[str], flag: str) -> bool:
    return any(a == flag or a.startswith(flag + "=") for a in argv)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _load_samples(path: Path):
    from .datapipe import AnnotationError, load_dataset

    try:
        return load_dataset(path)
    except AnnotationError as exc:
        raise UsageError(str(exc)) from exc


def _train_val(cfg: RunConfig):
    from .datapipe import split_dataset

    samples = _load_samples(cfg.data)
    if not samples:
        raise UsageError(f"{cfg.data}: dataset has no annotated images")
    if cfg.val_data is not None:
        return samples, _load_samples(cfg.val_data)
    if cfg.train_fraction < 1.0:
        if len(samples) < 2:
            raise UsageError("need at least two images to split off a validation set")
        return split_dataset(samples, cfg.train_fraction, cfg.seed)
    return samples, []


def _metrics_csv(metrics) -> str:
    from .multibox import METRICS_HEADER

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for m in metrics:
        w.writerow(m.csv_row())
    return buf.getvalue()


def _read_metrics_csv(path: Path, upto: int) -> list:
    from .multibox import EpochMetrics

    def num(s):
        return None if s in ("", "undefined") else float(s)

    rows = []
    if not path.exists():
        return rows
    with path.open() as fh:
        for r in csv.DictReader(fh):
            if int(r["epoch"]) > upto:
                break
            acc = tuple(num(r[k]) for k in ("val_count_accuracy_aggregate", "val_count_accuracy_punctate", "val_count_accuracy_erythrocyte"))
            rows.append(EpochMetrics(int(r["epoch"]), float(r["train_loss"]), num(r["val_loss"]), acc))
    return rows


def _latest_checkpoint(ckdir: Path) -> Path | None:
    found = sorted(ckdir.glob("epoch_*.ckpt"))
    return found[-1] if found else None


def _load_model(path: Path, config=None):
    from .checkpoint import CheckpointError
    from .multibox import load_network
    from .ndtensor import ShapeError

    try:
        return load_network(path, config)
    except ShapeError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    except (CheckpointError, KeyError, OSError) as exc:
        raise UsageError(f"{path}: unreadable checkpoint ({exc})") from exc


def _read_images(directory: Path):
    from .datapipe import read_image, standardize_image
    from .datapipe.dataset import list_images

    if not directory.is_dir():
        raise UsageError(f"--images: {directory} is not a directory")
    out = []
    for p in list_images(directory):
        try:
            img = read_image(p)
        except (OSError, ValueError) as exc:
            raise UsageError(f"{p}: cannot read image ({exc})") from exc
        if img.shape[:2] != (300, 300):
            img = standardize_image(img, "resample")[0]
        out.append((p.name, img))
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .datapipe import synthesize_dataset

    if args.images < 1:
        raise UsageError("--images must be at least 1")
    if args.cells_min > args.cells_max:
        raise UsageError("--cells-min exceeds --cells-max")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        manifest = synthesize_dataset(
            out,
            args.images,
            args.seed,
            args.ratio,
            (args.cells_min, args.cells_max),
            args.heinz_frac,
            args.aggregate_total,
            args.preset,
            args.prefix,
        )
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {out}: {exc.strerror or exc}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    t = manifest["totals"]
    n_heinz = sum(len(e["heinz"]) for e in manifest["images"])
    print(f"wrote {args.images} images to {out}")
    print(f"aggregate_reticulocyte {t['aggregate_reticulocyte']}")
    print(f"punctate_reticulocyte {t['punctate_reticulocyte']}")
    print(f"erythrocyte {t['erythrocyte']} (of which Heinz-body distractors {n_heinz})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .multibox import ModelConfig, NumericalFailure, TrainOptions, build_model, save_network, train
    from .optim import NonFiniteGradient
    from .plotting import plot_learning_curve

    cfg = RunConfig.from_args(args)
    cfg.validate_paths()
    if args.resume and args.init:
        raise UsageError("--resume and --init are mutually exclusive")
    init = Path(args.init) if args.init else None
    if init is not None and not init.is_file():
        raise UsageError(f"--init: {init} does not exist")
    train_set, val_set = _train_val(cfg)
    log.info("training on %d images, validating on %d", len(train_set), len(val_set))

    ckdir = cfg.out / "checkpoints"
    metrics_path = cfg.out / "metrics.csv"
    state, start, history = None, 0, []
    if args.resume:
        last = _latest_checkpoint(ckdir)
        if last is None:
            raise UsageError(f"--resume: no checkpoints in {ckdir}")
        net, state, extra = _load_model(last)
        start = int(extra.get("epoch", 0))
        history = _read_metrics_csv(metrics_path, start)
        log.info("resuming after epoch %d from %s", start, last)
    elif init is not None:
        net = _load_model(init)[0]
    else:
        net = build_model(ModelConfig(), cfg.seed)

    freeze = tuple(s.strip() for s in args.freeze.split(",") if s.strip())
    opts = TrainOptions(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        augment=cfg.augment,
        conf_threshold=cfg.conf_threshold,
        nms_iou=cfg.nms_iou,
        cross_class_iou=cfg.cross_class_iou,
        top_k=cfg.top_k,
        freeze=freeze,
    )

    def on_epoch(m):
        history.append(m)
        _write(metrics_path, _metrics_csv(history))

    try:
        net, _, state = train(net, train_set, cfg.hyper(), opts, val_set or None, ckdir, state, start, on_epoch)
    except (NumericalFailure, NonFiniteGradient) as exc:
        raise NumericError(str(exc)) from exc
    _write(metrics_path, _metrics_csv(history))
    save_network(cfg.out / "model.ckpt", net, state, {"epoch": max(cfg.epochs, start)})
    if history:
        plot_learning_curve([{"epoch": m.epoch, "train_loss": m.train_loss, "val_loss": m.val_loss} for m in history], cfg.out / "figures" / "learning_curve.png")
    print(f"trained {len(history)} epochs; model written to {cfg.out / 'model.ckpt'}")
    if history:
        last = history[-1]
        print(f"final train_loss {last.train_loss:.4f}" + ("" if last.val_loss is None else f" val_loss {last.val_loss:.4f}"))
    return EXIT_OK


def _model_override(args, checkpoint_path: Path):
    """Configuration forced by --channels/--n-classes, or None to use the checkpoint's."""
    from . import checkpoint
    from .multibox import BlockSpec, ModelConfig

    if not args.channels and not args.n_classes:
        return None
    entries = checkpoint.load(checkpoint_path)
    config = ModelConfig.from_dict(checkpoint.decode_json(entries["meta/model_config"]))
    if args.channels:
        try:
            chans = [int(c) for c in args.channels.split(",")]
        except ValueError as exc:
            raise UsageError(f"--channels: expected comma-separated integers, got {args.channels!r}") from exc
        if len(chans) != len(config.blocks):
            raise UsageError(f"--channels: expected {len(config.blocks)} values, got {len(chans)}")
        config = replace(config, blocks=tuple(BlockSpec(c, b.stride, b.pool) for c, b in zip(chans, config.blocks)))
    if args.n_classes:
        config = replace(config, n_classes=args.n_classes)
    return config


def _detect_all(net, images, cfg: RunConfig):
    from .multibox import detect_batch

    dets = detect_batch(net, [im for _, im in images], cfg.conf_threshold, cfg.nms_iou, cfg.top_k, cross_class_iou=cfg.cross_class_iou)
    return {name: d for (name, _), d in zip(images, dets)}


def cmd_count(args) -> int:
    from .countreport import count_cells, render_overlay
    from .datapipe import write_image
    from .detgeom import write_detections
    from .plotting import overlay_figure, plot_counts

    cfg = RunConfig.from_args(args)
    cfg.validate_paths()
    try:
        override = _model_override(args, cfg.checkpoint)
    except (KeyError, ValueError) as exc:
        raise UsageError(f"{cfg.checkpoint}: unreadable checkpoint ({exc})") from exc
    net = _load_model(cfg.checkpoint, override)[0]
    images = _read_images(Path(args.images))
    truth = {}
    if args.truth:
        from .datapipe import AnnotationError, load_annotations

        try:
            truth = {a.image_id: a for a in load_annotations(args.truth)}
        except AnnotationError as exc:
            raise UsageError(str(exc)) from exc
    detections = _detect_all(net, images, cfg) if images else {}
    report = count_cells(detections, cfg.conf_threshold)
    _write(cfg.out / "counts.csv", report.to_csv())
    _write(cfg.out / "report.txt", report.to_text())
    write_detections(cfg.out / "detections.txt", detections)
    plot_counts(report, cfg.out / "figures" / "counts.png")
    if args.overlays:
        for name, img in images:
            stem = Path(name).stem
            write_image(cfg.out / "overlays" / f"{stem}.png", render_overlay(img, detections[name], truth.get(name)))
            overlay_figure(img, detections[name], cfg.out / "figures" / "overlays" / f"{stem}.png", truth.get(name))
    sys.stdout.write(report.to_text())
    return EXIT_OK


def cmd_eval(args) -> int:
    from .countreport import count_cells, counts_from_annotations, distractor_false_positives, evaluate_counts, evaluate_detections, fmt
    from .detgeom import read_detections

    cfg = RunConfig.from_args(args)
    cfg.validate_paths()
    samples = _load_samples(cfg.data)
    annotations = [_annotation_of(s) for s in samples]
    if args.detections:
        try:
            detections = read_detections(args.detections)
        except OSError as exc:
            raise UsageError(f"--detections: cannot read {args.detections}: {exc.strerror}") from exc
        except ValueError as exc:
            raise UsageError(f"--detections: {exc}") from exc
        detections = {k: [d for d in v if d.confidence >= cfg.conf_threshold] for k, v in detections.items()}
    else:
        net = _load_model(cfg.checkpoint)[0]
        detections = _detect_all(net, [(s.image_id, s.image) for s in samples], cfg)
    for s in samples:
        detections.setdefault(s.image_id, [])
    pred = count_cells({s.image_id: detections[s.image_id] for s in samples}, cfg.conf_threshold)
    truth = counts_from_annotations(annotations)
    ce = evaluate_counts(pred, truth)
    de = evaluate_detections(detections, annotations, args.match_iou)
    n_heinz = sum(len(s.heinz) for s in samples)
    heinz_fp = sum(distractor_false_positives(detections[s.image_id], s.boxes, s.heinz, args.match_iou) for s in samples)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "truth", "predicted", "count_ratio_pct", "tp", "fp", "fn", "precision", "recall"])
    for row, name in zip(ce.to_rows(), de.per_class):
        st = de.per_class[name]
        w.writerow(row + [st.tp, st.fp, st.fn, fmt(st.precision), fmt(st.recall)])
    _write(cfg.out / "eval.csv", buf.getvalue())
    lines = [
        f"images evaluated:                  {len(samples)}",
        *(f"{r[0]:<34s} predicted {r[2]} / truth {r[1]} = {r[3]} %" for r in ce.to_rows()),
        f"reticulocyte % predicted:          {fmt(ce.predicted_pct, 2)}",
        f"reticulocyte % ground truth:       {fmt(ce.truth_pct, 2)}",
        f"reticulocyte % delta (pred-truth): {fmt(ce.pct_delta, 2)}",
        f"Heinz-body distractors:            {n_heinz}",
        f"aggregate detections on Heinz:     {heinz_fp}",
    ]
    text = "\n".join(lines) + "\n"
    _write(cfg.out / "eval.txt", text)
    sys.stdout.write(text)
    return EXIT_OK


def _annotation_of(sample):
    from .datapipe import Annotation, LabeledBox
    from .detgeom import CLASS_NAMES, Box

    objs = tuple(LabeledBox(CLASS_NAMES[int(l)], Box.from_array(b)) for b, l in zip(sample.boxes, sample.labels))
    return Annotation(sample.image_id, 300, 300, objs)


def cmd_ablation(args) -> int:
    from .multibox import run_count_regression_ablation
    from .plotting import plot_ablation

    cfg = RunConfig.from_args(args)
    cfg.validate_paths()
    train_set, val_set = _train_val(cfg)
    record = run_count_regression_ablation(train_set, val_set, cfg.epochs, cfg.hyper(), cfg.seed, cfg.batch_size)
    if not all(np.isfinite(r["train_loss"]) for r in record["curve"]):
        raise NumericError("count regression diverged (non-finite training MSE)")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_mse", "val_mse", "baseline_train_mse", "baseline_val_mse"])
    for r in record["curve"]:
        w.writerow([r["epoch"], f"{r['train_loss']:.6f}", f"{r['val_loss']:.6f}", f"{record['baseline_train']:.6f}", f"{record['baseline_val']:.6f}"])
    _write(cfg.out / "ablation.csv", buf.getvalue())
    plot_ablation(record, cfg.out / "figures" / "ablation.png")
    last = record["curve"][-1]
    beats = last["val_loss"] < record["baseline_val"] if val_set else last["train_loss"] < record["baseline_train"]
    lines = [
        f"epochs:                         {cfg.epochs}",
        f"final train MSE:                {last['train_loss']:.4f}",
        f"final validation MSE:           {last['val_loss']:.4f}",
        f"constant baseline train MSE:    {record['baseline_train']:.4f}",
        f"constant baseline val MSE:      {record['baseline_val']:.4f}",
        f"training mean counts (a, p, e): {', '.join(f'{v:.3f}' for v in record['train_mean_counts'])}",
        f"regressor beats constant baseline: {'yes' if beats else 'no'}",
    ]
    text = "\n".join(lines) + "\n"
    _write(cfg.out / "ablation.txt", text)
    _write(cfg.out / "ablation.json", json.dumps(record, indent=1, sort_keys=True) + "\n")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(args) -> int:
    from . import verify

    results = verify.run(args.suite)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} properties passed")
    if failed:
        raise NumericError(f"{len(failed)} verification properties failed")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "count": cmd_count,
    "eval": cmd_eval,
    "ablation": cmd_ablation,
    "verify": cmd_verify,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse(argv)
    except UsageError as exc:
        print(f"reticount: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # argparse reports usage errors this way
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"reticount: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"reticount: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
