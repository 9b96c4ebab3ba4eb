"""Segmentation and depth evaluation metrics."""
from __future__ import annotations

import numpy as np

from .errors import EmptyAccumulator, NoValidPixels


class ConfusionAccumulator:
    """C x C confusion counts (rows = ground truth, columns = prediction)."""

    def __init__(self, num_classes: int, ignore_index: int = 255):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred, gt) -> "ConfusionAccumulator":
        pred = np.asarray(pred).reshape(-1)
        gt = np.asarray(gt).reshape(-1)
        keep = gt != self.ignore_index
        idx = gt[keep].astype(np.int64) * self.num_classes + pred[keep].astype(np.int64)
        self.counts += np.bincount(idx, minlength=self.num_classes ** 2).reshape(self.num_classes, -1)
        return self

    def merge(self, other: "ConfusionAccumulator") -> "ConfusionAccumulator":
        out = ConfusionAccumulator(self.num_classes, self.ignore_index)
        out.counts = self.counts + other.counts
        return out

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def iou_per_class(self) -> np.ndarray:
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(0) + self.counts.sum(1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)


def miou(acc: ConfusionAccumulator) -> float:
    """Mean IoU over classes whose union is nonzero."""
    if acc.total == 0:
        raise EmptyAccumulator("no scored pixels")
    return float(np.nanmean(acc.iou_per_class()))


def _masked(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if mask is None:
        mask = gt > 0
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), gt.shape)
    if not mask.any():
        raise NoValidPixels("mask selects no pixels")
    return pred[mask], gt[mask]


def abs_rel(pred, gt, mask=None) -> float:
    p, g = _masked(pred, gt, mask)
    return float(np.mean(np.abs(p - g) / g))


def rmse(pred, gt, mask=None) -> float:
    p, g = _masked(pred, gt, mask)
    return float(np.sqrt(np.mean((p - g) ** 2)))


def delta_threshold(pred, gt, mask=None, k: int = 1) -> float:
    """Fraction of pixels with max(pred/gt, gt/pred) < 1.25**k."""
    p, g = _masked(pred, gt, mask)
    ratio = np.maximum(p / g, g / p)
    return float(np.mean(ratio < 1.25 ** k))
