"""Figures written next to the CLI's tab-separated output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from masf.postproc import iou  # noqa: E402

GT_COLOR = "#2ca02c"
A_COLOR = "#1f77b4"
B_COLOR = "#ff7f0e"
HIGHLIGHT_COLOR = "#d62728"


def _hits(dets, gts, iou_threshold: float) -> list[bool]:
    """Per GT: does some same-class detection overlap it at ``iou_threshold``?"""
    return [any(d.class_id == g.class_id and iou(d.box, g.box) >= iou_threshold for d in dets)
            for g in gts]


def highlighted_gts(dets_a, dets_b, gts, iou_threshold: float = 0.5) -> list[int]:
    """Indices of GTs found by model B but missed by model A."""
    hit_a, hit_b = _hits(dets_a, gts, iou_threshold), _hits(dets_b, gts, iou_threshold)
    return [k for k, (a, b) in enumerate(zip(hit_a, hit_b)) if b and not a]


def _draw_boxes(ax, boxes, color, lw=1.0, ls="-"):
    for x1, y1, x2, y2 in boxes:
        ax.add_patch(Rectangle((x1, y1), x2 - x1, y2 - y1, fill=False, edgecolor=color,
                               linewidth=lw, linestyle=ls))


def render_comparison(image, dets_a, dets_b, gts, path, iou_threshold: float = 0.5,
                      labels=("A", "B"), pad: float = 1.5) -> list[int]:
    """Side-by-side panels for two models on one image; returns the highlighted GT indices.

    ``image`` is ``(3, H, W)`` or ``(1, 3, H, W)`` in [0, 1]. GT boxes are green in
    both panels, model A blue, model B orange. A GT that B finds and A misses is
    outlined in red on the B panel, slightly enlarged so it stays visible.
    """
    img = np.asarray(getattr(image, "data", image))
    if img.ndim == 4:
        img = img[0]
    rgb = np.clip(img.transpose(1, 2, 0), 0, 1)
    red = highlighted_gts(dets_a, dets_b, gts, iou_threshold)
    fig, axes = plt.subplots(1, 2, figsize=(8, 4.3))
    for ax, dets, color, label in zip(axes, (dets_a, dets_b), (A_COLOR, B_COLOR), labels):
        ax.imshow(rgb, interpolation="nearest")
        _draw_boxes(ax, [g.box for g in gts], GT_COLOR)
        _draw_boxes(ax, [d.box for d in dets], color)
        ax.set_title(f"{label}: {len(dets)} detections", fontsize=9)
        ax.set_axis_off()
    _draw_boxes(axes[1], [(gts[k].x1 - pad, gts[k].y1 - pad, gts[k].x2 + pad, gts[k].y2 + pad)
                          for k in red], HIGHLIGHT_COLOR, lw=1.6)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return red


def plot_pr_curves(curves: dict, path, class_names=None):
    """One recall/precision line per class from ``{class_id: PRCurve}``."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for cls, curve in sorted(curves.items()):
        if not curve.points:
            continue
        r, p = zip(*curve.points)
        name = class_names[cls] if class_names else f"class {cls}"
        ax.plot((0.0,) + r, (p[0],) + p, drawstyle="steps-post", label=name)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.legend(fontsize=8, loc="lower left")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_training_curves(records: list[dict], path):
    """Loss components and held-out mAP against epoch."""
    epochs = [r["epoch"] for r in records]
    fig, (ax_l, ax_m) = plt.subplots(1, 2, figsize=(9, 3.5))
    for key in ("loss", "box", "cls"):
        ax_l.plot(epochs, [r[key] for r in records], label=key)
    ax_l.set_xlabel("epoch")
    ax_l.set_ylabel("training loss")
    ax_l.legend(fontsize=8)
    for key in ("map50", "map5095"):
        pts = [(r["epoch"], r[key]) for r in records if r.get(key) is not None]
        if pts:
            ax_m.plot(*zip(*pts), marker="o", ms=3, label=key)
    ax_m.set_xlabel("epoch")
    ax_m.set_ylabel("held-out mAP")
    ax_m.set_ylim(0, 1)
    ax_m.legend(fontsize=8)
    for ax in (ax_l, ax_m):
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_figure_set(out_dir, records=None, curves=None) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if records:
        plot_training_curves(records, out_dir / "training_curves.png")
        written.append(out_dir / "training_curves.png")
    if curves:
        plot_pr_curves(curves, out_dir / "pr_curves.png")
        written.append(out_dir / "pr_curves.png")
    return written
