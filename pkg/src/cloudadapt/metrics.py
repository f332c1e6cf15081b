"""Confusion-matrix segmentation metrics: per-class IoU / Acc / Dice and their means."""

import math
from fractions import Fraction

import numpy as np

from .errors import DataError


class ConfusionMatrix:
    """``counts[g, p]`` = number of scored pixels with ground truth g predicted as p."""

    def __init__(self, num_classes, ignore_label=None, counts=None):
        self.num_classes = int(num_classes)
        self.ignore_label = ignore_label
        if counts is None:
            counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.int64)

    def _check(self, labels, what):
        bad = (labels < 0) | (labels >= self.num_classes)
        if self.ignore_label is not None and what == "gt":
            bad &= labels != self.ignore_label
        if bad.any():
            pos = tuple(int(i) for i in np.argwhere(bad)[0])
            raise DataError(f"{what} label {int(labels[pos])} at {pos} outside [0, {self.num_classes})")

    def accumulate(self, pred, gt):
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise DataError(f"prediction shape {pred.shape} differs from ground truth {gt.shape}")
        self._check(gt, "gt")
        keep = np.ones(gt.shape, bool) if self.ignore_label is None else gt != self.ignore_label
        self._check(pred[keep], "pred")
        c = self.num_classes
        idx = gt[keep].astype(np.int64) * c + pred[keep].astype(np.int64)
        self.counts += np.bincount(idx, minlength=c * c).reshape(c, c)
        return self

    def merge(self, other):
        if other.num_classes != self.num_classes:
            raise DataError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.ignore_label, self.counts + other.counts)

    @property
    def total(self):
        return int(self.counts.sum())

    def stats(self, i):
        """Integer ``(tp, fp, fn, tn)`` for class ``i``."""
        tp = int(self.counts[i, i])
        fp = int(self.counts[:, i].sum()) - tp
        fn = int(self.counts[i, :].sum()) - tp
        return tp, fp, fn, self.total - tp - fp - fn


def _absent(tp, fp, fn):
    return tp + fp + fn == 0


def _ratios(cm, i):
    """Exact ``(iou, acc, dice)`` for class ``i``, or None when the class is absent."""
    tp, fp, fn, tn = cm.stats(i)
    if _absent(tp, fp, fn):
        return None
    return Fraction(tp, tp + fp + fn), Fraction(tp + tn, cm.total), Fraction(2 * tp, 2 * tp + fp + fn)


def _as_float(r, k):
    return math.nan if r is None else float(r[k])


def iou(cm, i):
    return _as_float(_ratios(cm, i), 0)


def acc(cm, i):
    return _as_float(_ratios(cm, i), 1)


def dice(cm, i):
    return _as_float(_ratios(cm, i), 2)


def summarize(cm):
    """Per-class metrics plus mIoU / mAcc / mDice (over present classes) and aAcc, as fractions.

    Means are taken over the exact per-class ratios and rounded once.
    """
    if cm.total == 0:
        raise DataError("confusion matrix is empty; nothing was scored")
    exact = [_ratios(cm, i) for i in range(cm.num_classes)]
    present = [r for r in exact if r is not None]

    def mean(k):
        return float(sum(r[k] for r in present) / len(present)) if present else math.nan

    return {
        "per_class": [{"iou": _as_float(r, 0), "acc": _as_float(r, 1), "dice": _as_float(r, 2)} for r in exact],
        "mIoU": mean(0),
        "mAcc": mean(1),
        "mDice": mean(2),
        "aAcc": int(np.trace(cm.counts)) / cm.total,
    }


def _pct(v):
    return "nan" if math.isnan(v) else f"{100.0 * v:.2f}"


def summary_csv(summary, class_names=None):
    """CSV text: one ``class,iou,acc,dice`` row per class plus a ``mean`` row carrying aAcc.

    Values are percentages with two decimals.
    """
    lines = ["class,iou,acc,dice,aacc"]
    for i, row in enumerate(summary["per_class"]):
        name = class_names[i] if class_names else str(i)
        lines.append(f"{name},{_pct(row['iou'])},{_pct(row['acc'])},{_pct(row['dice'])},")
    lines.append(f"mean,{_pct(summary['mIoU'])},{_pct(summary['mAcc'])},{_pct(summary['mDice'])},{_pct(summary['aAcc'])}")
    return "\n".join(lines) + "\n"
