"""mIoU / FB-IoU bookkeeping and the random-predictor analysis.

Intersections and unions live in 2 x C integer matrices: row 0 holds the
complementary ("not c", background) counts, row 1 the class counts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


def confusion(pred, gt) -> tuple[int, int, int, int]:
    """``(TP, FP, FN, TN)`` for a binary prediction against a binary mask."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} != ground truth shape {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn, pred.size - tp - fp - fn


@dataclass
class IoUAccumulator:
    num_classes: int
    intersection: np.ndarray = field(default=None)
    union: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("need at least one class")
        if self.intersection is None:
            self.intersection = np.zeros((2, self.num_classes), dtype=np.int64)
        if self.union is None:
            self.union = np.zeros((2, self.num_classes), dtype=np.int64)

    def add_counts(self, class_id: int, tp: int, fp: int, fn: int, tn: int) -> "IoUAccumulator":
        if not 0 <= class_id < self.num_classes:
            raise ValueError(f"class id {class_id} outside [0, {self.num_classes})")
        self.intersection[1, class_id] += tp
        self.union[1, class_id] += tp + fp + fn
        self.intersection[0, class_id] += tn
        self.union[0, class_id] += tn + fn + fp
        return self

    def merge(self, other: "IoUAccumulator") -> "IoUAccumulator":
        if other.num_classes != self.num_classes:
            raise ValueError("class count mismatch")
        return IoUAccumulator(self.num_classes, self.intersection + other.intersection, self.union + other.union)

    __add__ = merge


def accumulate(pred, gt, class_id: int, acc: IoUAccumulator) -> IoUAccumulator:
    """Add one episode's counts to ``acc`` (in place) and return it."""
    return acc.add_counts(class_id, *confusion(pred, gt))


def class_ious(acc: IoUAccumulator) -> np.ndarray:
    """Per-class IoU, NaN where the class never occurred."""
    i, u = acc.intersection[1].astype(np.float64), acc.union[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(u > 0, i / np.where(u > 0, u, 1), np.nan)


def miou(acc: IoUAccumulator) -> float:
    ious = class_ious(acc)
    present = ~np.isnan(ious)
    if not present.any():
        raise ValueError("no class has a non-empty union")
    if not present.all():
        log.info("excluding %d empty classes from mIoU", int((~present).sum()))
    return float(ious[present].mean())


def fbiou(acc: IoUAccumulator) -> float:
    uf, ub = int(acc.union[1].sum()), int(acc.union[0].sum())
    if uf == 0 and ub == 0:
        raise ValueError("both foreground and background unions are empty")
    iou_f = acc.intersection[1].sum() / uf if uf else 0.0
    iou_b = acc.intersection[0].sum() / ub if ub else 0.0
    return float(0.5 * (iou_f + iou_b))


def miou_per_episode(records) -> float:
    """Alternative mIoU: per-episode IoUs averaged within each class, then across classes."""
    by_class: dict[int, list[float]] = {}
    for r in records:
        u = r["tp"] + r["fp"] + r["fn"]
        if u:
            by_class.setdefault(r["class_id"], []).append(r["tp"] / u)
    if not by_class:
        raise ValueError("no episode with a non-empty union")
    return float(np.mean([np.mean(v) for v in by_class.values()]))


# ---------------------------------------------------------------------------
# random predictor


@dataclass(frozen=True)
class RatioPair:
    true_ratio: float
    pred_ratio: float

    def __post_init__(self):
        for r in (self.true_ratio, self.pred_ratio):
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"ratio {r} outside [0, 1]")


def _random_class_iou(r: float, p: float) -> float:
    num = p * r
    den = p * r + r * (1 - p) + (1 - r) * p
    return num / den if den > 0 else 0.0


def expected_random_iou(ratios: RatioPair) -> tuple[float, float]:
    """Expected ``(mIoU, FB-IoU)`` of a Bernoulli predictor."""
    r, p = ratios.true_ratio, ratios.pred_ratio
    iou_f = _random_class_iou(r, p)
    iou_b = _random_class_iou(1 - r, 1 - p)
    return iou_f, 0.5 * (iou_f + iou_b)


def random_iou_gradients(ratios: RatioPair) -> tuple[float, float]:
    """Derivatives of the expected ``(mIoU, FB-IoU)`` w.r.t. the predicted ratio."""
    r, p = ratios.true_ratio, ratios.pred_ratio
    den_f = r * p - r - p
    den_b = 1 - p * r
    if den_f == 0 or den_b == 0:
        raise ValueError(f"gradient undefined at true_ratio={r}, pred_ratio={p}")
    d_miou = r**2 / den_f**2
    d_fbiou = 0.5 * (r**2 / den_f**2 - (r - 1) ** 2 / den_b**2)
    return d_miou, d_fbiou
