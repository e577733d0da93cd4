"""Segmentation metrics through an explicit confusion matrix.

Rows index ground-truth classes, columns predicted classes. Classes absent
from both prediction and ground truth drop out of the mIoU/F1 means;
0/0 precision or recall for a class that does appear counts as 0.
F1 is macro-averaged.
"""

from __future__ import annotations

import numpy as np

from .losses import IGNORE_INDEX

METRIC_CSV_HEADER = "iter,miou,oa,f1"


class ConfusionMatrix:
    def __init__(self, num_classes):
        if num_classes < 1:
            raise ValueError("need at least one class")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, pred, gt, ignore_index=IGNORE_INDEX):
        """Accumulate pixel counts; ignored pixels are skipped."""
        pred = np.asarray(pred).reshape(-1)
        gt = np.asarray(gt).reshape(-1)
        if pred.shape != gt.shape:
            raise ValueError(f"pred size {pred.shape} != gt size {gt.shape}")
        valid = gt != ignore_index
        pred, gt = pred[valid], gt[valid]
        k = self.num_classes
        if pred.size and (pred.max() >= k or gt.max() >= k or pred.min() < 0 or gt.min() < 0):
            raise ValueError(f"class id outside [0, {k})")
        self.counts += np.bincount(
            gt.astype(np.int64) * k + pred.astype(np.int64), minlength=k * k
        ).reshape(k, k)
        return self

    def merge(self, other):
        self.counts += other.counts
        return self

    @property
    def total(self):
        return int(self.counts.sum())

    def _check_scored(self):
        if self.total == 0:
            raise ValueError("empty confusion matrix: no scored pixels")

    def _tp_fp_fn(self):
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        return tp, fp, fn

    def present_mask(self):
        """Classes appearing in ground truth or prediction."""
        return (self.counts.sum(axis=0) + self.counts.sum(axis=1)) > 0

    def per_class_iou(self):
        self._check_scored()
        tp, fp, fn = self._tp_fp_fn()
        denom = tp + fp + fn
        with np.errstate(invalid="ignore"):
            iou = np.where(denom > 0, tp / np.maximum(denom, 1), 0.0)
        return iou

    def miou(self):
        present = self.present_mask()
        return float(self.per_class_iou()[present].mean())

    def oa(self):
        self._check_scored()
        return float(np.trace(self.counts) / self.total)

    def f1(self):
        self._check_scored()
        tp, fp, fn = self._tp_fp_fn()
        prec = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
        rec = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), 0.0)
        pr = prec + rec
        f1 = np.where(pr > 0, 2 * prec * rec / np.where(pr > 0, pr, 1), 0.0)
        present = self.present_mask()
        return float(f1[present].mean())

    def summary(self):
        return {"miou": self.miou(), "oa": self.oa(), "f1": self.f1()}


def evaluate_predictions(preds, gts, num_classes, ignore_index=IGNORE_INDEX):
    cm = ConfusionMatrix(num_classes)
    for p, g in zip(preds, gts):
        cm.add(p, g, ignore_index)
    return cm
