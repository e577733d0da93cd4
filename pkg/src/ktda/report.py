"""Figure rendering for run reports.

Every CSV the trainer or evaluator writes gets a matplotlib rendering next
to it; masks export as palette PNGs (pixel value = class id, palette =
class color), so the files stay class-indexed while viewers show colors.
"""

from __future__ import annotations

import csv
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from PIL import Image

from .data import class_colors
from .train import lr_at


def _read_csv(path):
    with open(path) as f:
        rows = list(csv.reader(f))
    header, body = rows[0], rows[1:]
    cols = {name: np.array([float(r[i]) for r in body]) for i, name in enumerate(header)}
    return cols


def _save(fig, out_path):
    os.makedirs(os.path.dirname(os.path.abspath(out_path)), exist_ok=True)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_loss_curves(loss_csv, out_path):
    cols = _read_csv(loss_csv)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    it = cols["iter"]
    for term in ("mse", "kl", "kt"):
        ax1.plot(it, cols[term], label=term, linewidth=1)
    ax1.set_title("knowledge transfer terms")
    for term in ("ce", "aux", "da", "total"):
        ax2.plot(it, cols[term], label=term, linewidth=1)
    ax2.set_title("adaptation terms and total")
    for ax in (ax1, ax2):
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
    return _save(fig, out_path)


def plot_metric_curves(metric_csv, out_path):
    cols = _read_csv(metric_csv)
    if cols["iter"].size == 0:
        return None
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in ("miou", "oa", "f1"):
        ax.plot(cols["iter"], cols[name], marker="o", markersize=3, label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("score")
    ax.set_ylim(0, 1)
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, out_path)


def plot_alignment_curve(align_csv, out_path):
    cols = _read_csv(align_csv)
    if cols["iter"].size == 0:
        return None
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(cols["iter"], cols["cosine"], linewidth=1)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean cosine(student, teacher)")
    ax.set_title("feature alignment progress")
    ax.grid(alpha=0.3)
    return _save(fig, out_path)


def plot_lr_schedule(optim_cfg, out_path):
    its = np.arange(optim_cfg.max_iters + 1)
    lrs = [lr_at(int(i), optim_cfg) for i in its]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(its, lrs, linewidth=1.2)
    ax.axvline(optim_cfg.warmup_iters, linestyle="--", color="gray", linewidth=0.8)
    ax.set_xlabel("iteration")
    ax.set_ylabel("learning rate")
    ax.grid(alpha=0.3)
    return _save(fig, out_path)


def plot_per_class_iou(ious, out_path, class_names=None):
    k = len(ious)
    names = class_names or [f"class {i}" for i in range(k)]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(k), np.asarray(ious) * 100.0, color=class_colors(k))
    ax.set_xticks(range(k), names, rotation=20, fontsize=8)
    ax.set_ylabel("IoU (%)")
    ax.set_ylim(0, 100)
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, out_path)


def plot_confusion(cm_counts, out_path):
    counts = np.asarray(cm_counts, dtype=np.float64)
    norm = counts / np.maximum(counts.sum(axis=1, keepdims=True), 1)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    im = ax.imshow(norm, cmap="viridis", vmin=0, vmax=1)
    ax.set_xlabel("predicted")
    ax.set_ylabel("ground truth")
    fig.colorbar(im, ax=ax, fraction=0.046)
    k = counts.shape[0]
    if k <= 12:
        for i in range(k):
            for j in range(k):
                ax.text(j, i, f"{norm[i, j]:.2f}", ha="center", va="center",
                        color="white" if norm[i, j] < 0.6 else "black", fontsize=7)
    return _save(fig, out_path)


def plot_ablation_summary(summary_csv, out_path):
    with open(summary_csv) as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return None
    names = [r["name"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(6, len(names) * 1.1), 4))
    x = np.arange(len(names))
    for off, key in zip((-0.25, 0.0, 0.25), ("miou", "oa", "f1")):
        ax.bar(x + off, [float(r[key]) * 100 for r in rows], width=0.25, label=key)
    ax.set_xticks(x, names, rotation=25, fontsize=8, ha="right")
    ax.set_ylabel("score (%)")
    ax.legend()
    ax.grid(axis="y", alpha=0.3)
    return _save(fig, out_path)


def save_mask_png(mask, out_path, num_classes):
    """Class-indexed palette PNG: data stays ids, palette carries colors."""
    mask = np.asarray(mask, dtype=np.uint8)
    img = Image.fromarray(mask, mode="P")
    palette = np.zeros((256, 3), dtype=np.uint8)
    palette[:num_classes] = (class_colors(num_classes) * 255).astype(np.uint8)
    img.putpalette(palette.reshape(-1).tolist())
    img.save(out_path)
    return out_path


def render_training_report(out_dir, optim_cfg, with_alignment=True):
    """All figures for a finished training run, into <out_dir>/figures."""
    fig_dir = os.path.join(out_dir, "figures")
    made = []
    loss_csv = os.path.join(out_dir, "loss.csv")
    if os.path.exists(loss_csv):
        made.append(plot_loss_curves(loss_csv, os.path.join(fig_dir, "loss_curves.png")))
    metric_csv = os.path.join(out_dir, "metrics.csv")
    if os.path.exists(metric_csv):
        p = plot_metric_curves(metric_csv, os.path.join(fig_dir, "metric_curves.png"))
        if p:
            made.append(p)
    align_csv = os.path.join(out_dir, "alignment.csv")
    if with_alignment and os.path.exists(align_csv):
        p = plot_alignment_curve(align_csv, os.path.join(fig_dir, "alignment.png"))
        if p:
            made.append(p)
    made.append(plot_lr_schedule(optim_cfg, os.path.join(fig_dir, "lr_schedule.png")))
    return [m for m in made if m]
