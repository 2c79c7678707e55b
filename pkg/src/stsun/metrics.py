"""Pixel classification metrics: P/R/F1/IoU/OA, AF/mIoU and SCS/BC/SC.

Ratios are formed from integer counts with exact rational arithmetic and
rounded to float once, so identities such as F1 = 2*IoU/(1+IoU) hold exactly.

Conventions:

* a ratio with an empty denominator is 0;
* AF and mIoU average over classes that occur in the prediction or the label
  (TP+FP+FN > 0); with no such class they are 0;
* BC with no true and no predicted change is 1; SC with no truly changed
  pixel is reported as 0 and flagged ``sc_defined=False``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .metadata import ValidationError


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(int(num), int(den)) if den else Fraction(0)


def binarize(logits: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """sigmoid(logits) >= threshold; p = 0.5 counts as positive."""
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(-np.abs(z))
    p = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return (p >= threshold).astype(np.int64)


def argmax_classify(logits: np.ndarray, axis: int = -3) -> np.ndarray:
    """Channel argmax; ties resolve to the lowest channel index."""
    return np.argmax(logits, axis=axis).astype(np.int64)


def classify(logits: np.ndarray, axis: int = -3) -> np.ndarray:
    """Class map from (..., C2, H, W) logits: sigmoid threshold when C2 == 1."""
    logits = np.asarray(logits)
    if logits.shape[axis] == 1:
        return binarize(np.take(logits, 0, axis=axis))
    return argmax_classify(logits, axis=axis)


@dataclass
class ConfusionCounts:
    """One-vs-all counts per class."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @classmethod
    def from_maps(cls, pred, label, n_classes: int) -> "ConfusionCounts":
        pred = np.asarray(pred, dtype=np.int64).reshape(-1)
        label = np.asarray(label, dtype=np.int64).reshape(-1)
        if pred.shape != label.shape:
            raise ValidationError("prediction and label must have the same shape")
        for name, arr in (("prediction", pred), ("label", label)):
            if arr.size and (arr.min() < 0 or arr.max() >= n_classes):
                raise ValidationError(f"{name} contains class indices outside [0, {n_classes})")
        cm = np.bincount(label * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)
        tp = np.diag(cm).copy()
        fp = cm.sum(axis=0) - tp
        fn = cm.sum(axis=1) - tp
        tn = pred.size - tp - fp - fn
        return cls(tp, fp, fn, tn)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def n_classes(self) -> int:
        return len(self.tp)

    @property
    def total(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0])

    def present(self, c: int) -> bool:
        return bool(self.tp[c] + self.fp[c] + self.fn[c])

    def precision(self, c) -> Fraction:
        return _ratio(self.tp[c], self.tp[c] + self.fp[c])

    def recall(self, c) -> Fraction:
        return _ratio(self.tp[c], self.tp[c] + self.fn[c])

    def f1(self, c) -> Fraction:
        # equals 2PR/(P+R) whenever P+R > 0
        return _ratio(2 * self.tp[c], 2 * self.tp[c] + self.fp[c] + self.fn[c])

    def iou(self, c) -> Fraction:
        return _ratio(self.tp[c], self.tp[c] + self.fp[c] + self.fn[c])

    def oa(self, c) -> Fraction:
        return _ratio(self.tp[c] + self.tn[c], self.total)


@dataclass
class ClassScore:
    index: int
    P: float
    R: float
    F1: float
    IoU: float
    OA: float


@dataclass
class Scores:
    per_class: list
    AF: float
    mIoU: float
    P: float
    R: float
    OA: float
    counts: ConfusionCounts = field(repr=False, default=None)

    @property
    def F1(self) -> float:
        return self.AF

    @property
    def IoU(self) -> float:
        return self.mIoU


def scores_from_counts(counts: ConfusionCounts, classes=None) -> Scores:
    """Per-class and aggregate scores; ``classes`` restricts which are reported."""
    classes = list(range(counts.n_classes)) if classes is None else list(classes)
    per_class = [ClassScore(c, float(counts.precision(c)), float(counts.recall(c)), float(counts.f1(c)),
                            float(counts.iou(c)), float(counts.oa(c))) for c in classes]
    present = [c for c in classes if counts.present(c)]

    def mean(fn):
        if not present:
            return 0.0
        return float(sum((fn(c) for c in present), Fraction(0)) / len(present))

    if len(classes) == 1:
        oa = float(counts.oa(classes[0]))
    else:
        oa = float(_ratio(int(counts.tp.sum()), counts.total))
    return Scores(per_class, mean(counts.f1), mean(counts.iou), mean(counts.precision), mean(counts.recall),
                  oa, counts)


def score(pred, label, n_classes: int, binary: bool = False) -> Scores:
    """Score class maps; with ``binary`` only the positive class 1 is reported."""
    counts = ConfusionCounts.from_maps(pred, label, n_classes)
    return scores_from_counts(counts, [1] if binary else None)


@dataclass
class ChangeScores:
    SCS: float
    BC: float
    SC: float
    sc_defined: bool


@dataclass
class ChangeCounts:
    """Sufficient statistics for SCS/BC/SC, additive across samples."""

    change_inter: int
    change_union: int
    semantic: ConfusionCounts = None

    def __add__(self, other: "ChangeCounts") -> "ChangeCounts":
        if self.semantic is None:
            sem = other.semantic
        elif other.semantic is None:
            sem = self.semantic
        else:
            sem = self.semantic + other.semantic
        return ChangeCounts(self.change_inter + other.change_inter, self.change_union + other.change_union, sem)

    def result(self) -> ChangeScores:
        bc = Fraction(1) if self.change_union == 0 else Fraction(self.change_inter, self.change_union)
        sem = self.semantic
        present = [c for c in range(sem.n_classes) if sem.present(c)] if sem is not None else []
        if sem is None or sem.total == 0 or not present:
            sc, defined = Fraction(0), False
        else:
            sc, defined = sum((sem.iou(c) for c in present), Fraction(0)) / len(present), True
        return ChangeScores(float((bc + sc) / 2), float(bc), float(sc), defined)


def change_counts(pred, label, n_classes: int) -> ChangeCounts:
    pred = np.asarray(pred, dtype=np.int64)
    label = np.asarray(label, dtype=np.int64)
    if pred.shape != label.shape:
        raise ValidationError("prediction and label must have the same shape")
    if pred.ndim < 3 or pred.shape[-3] < 2:
        raise ValidationError("SCS/BC/SC need at least two frames (T2 >= 2)")
    pc = pred[..., 1:, :, :] != pred[..., :-1, :, :]
    lc = label[..., 1:, :, :] != label[..., :-1, :, :]
    inter = int(np.count_nonzero(pc & lc))
    union = int(np.count_nonzero(pc | lc))
    after_p = pred[..., 1:, :, :][lc]
    after_l = label[..., 1:, :, :][lc]
    sem = ConfusionCounts.from_maps(after_p, after_l, n_classes) if after_l.size else None
    return ChangeCounts(inter, union, sem)


def scs_suite(pred_frames, label_frames, n_classes: int) -> ChangeScores:
    """SCS = (BC + SC) / 2 over class maps shaped (..., T2, H, W).

    BC is the IoU of predicted vs true change masks between adjacent frames;
    SC is the mIoU of the later-frame classes over truly changed pixels.
    """
    return change_counts(pred_frames, label_frames, n_classes).result()
