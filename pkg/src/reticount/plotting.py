"""Report figures rendered with matplotlib (Agg backend, written to files)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .countreport import CLASS_COLORS, CountReport  # noqa: E402
from .detgeom import CELL_CLASSES, Detection  # noqa: E402

_METADATA = {"Software": None}
_SHORT = {"aggregate_reticulocyte": "aggregate", "punctate_reticulocyte": "punctate", "erythrocyte": "erythrocyte"}


def _style(ax):
    ax.spines["top"].set_visible(False)
    ax.spines["right"].set_visible(False)
    ax.tick_params(direction="out", length=3)


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=_METADATA)
    plt.close(fig)
    return path


def plot_learning_curve(rows: Sequence[dict], path) -> Path:
    """``rows`` carry ``epoch``, ``train_loss`` and optionally ``val_loss``."""
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ep = [r["epoch"] for r in rows]
    ax.plot(ep, [r["train_loss"] for r in rows], marker="o", ms=3, label="train")
    val = [r.get("val_loss") for r in rows]
    if any(v is not None for v in val):
        ax.plot([e for e, v in zip(ep, val) if v is not None], [v for v in val if v is not None], marker="s", ms=3, label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("multibox loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    _style(ax)
    return _save(fig, path)


def plot_ablation(record: dict, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    curve = record["curve"]
    ep = [r["epoch"] for r in curve]
    ax.plot(ep, [r["train_loss"] for r in curve], marker="o", ms=3, label="train MSE")
    ax.plot(ep, [r["val_loss"] for r in curve], marker="s", ms=3, label="validation MSE")
    ax.axhline(record["baseline_train"], color="0.4", ls="--", lw=1, label="constant baseline (train)")
    ax.axhline(record["baseline_val"], color="0.7", ls=":", lw=1, label="constant baseline (val)")
    ax.set_xlabel("epoch")
    ax.set_ylabel("count MSE")
    ax.set_yscale("log")
    ax.legend(frameon=False, fontsize=8)
    _style(ax)
    return _save(fig, path)


def plot_counts(report: CountReport, path, truth: CountReport | None = None) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    xs = range(len(CELL_CLASSES))
    width = 0.38 if truth is not None else 0.6
    colors = [CLASS_COLORS[k] for k in (1, 2, 3)]
    ax.bar([x - (width / 2 if truth else 0) for x in xs], report.as_tuple(), width, color=colors, label="predicted")
    if truth is not None:
        ax.bar([x + width / 2 for x in xs], truth.as_tuple(), width, color="none", edgecolor="k", hatch="//", label="ground truth")
        ax.legend(frameon=False, fontsize=8)
    ax.set_xticks(list(xs))
    ax.set_xticklabels([_SHORT[c] for c in CELL_CLASSES])
    ax.set_ylabel("cells")
    pct = report.reticulocyte_pct
    ax.set_title("reticulocytes: " + ("undefined" if pct is None else f"{pct:.2f}%"), fontsize=10)
    _style(ax)
    return _save(fig, path)


def overlay_figure(image, detections: Sequence[Detection], path, truth=None) -> Path:
    """Prediction overlay with per-class colors and confidence captions."""
    h, w = image.shape[:2]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(image, interpolation="nearest")
    if truth is not None:
        for ob in truth.objects:
            b = ob.box
            ax.add_patch(Rectangle((b.xmin, b.ymin), b.xmax - b.xmin, b.ymax - b.ymin, fill=False, ec="w", ls="--", lw=0.8))
    for d in detections:
        b = d.box
        c = CLASS_COLORS[d.class_id]
        ax.add_patch(Rectangle((b.xmin, b.ymin), b.xmax - b.xmin, b.ymax - b.ymin, fill=False, ec=c, lw=1.2))
        ax.text(b.xmin, b.ymin - 1, f"{_SHORT[d.class_name][:3]} {d.confidence:.2f}", color=c, fontsize=6, va="bottom")
    ax.set_xlim(0, w)
    ax.set_ylim(h, 0)
    ax.axis("off")
    return _save(fig, path)
