"""Hard-example-mined cross entropy, the composite training loss, and mIoU."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autograd import Tensor, add, record, scale
from .errors import (DegenerateBatchError, DegenerateMetricError, LabelError,
                     ShapeError)


@dataclass
class LossWeights:
    alpha: float = 0.4
    beta: float = 0.4
    ohem_threshold: float = 0.7
    ohem_min_kept: Optional[int] = None   # None: scored-batch pixels // 16
    ignore_label: int = 255

    def __post_init__(self):
        if not 0.0 < self.ohem_threshold < 1.0:
            raise ValueError("ohem_threshold must lie in (0, 1)")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        if self.ohem_min_kept is not None and self.ohem_min_kept < 1:
            raise ValueError("ohem_min_kept must be >= 1")

    def min_kept_for(self, n_pixels):
        if self.ohem_min_kept is not None:
            return self.ohem_min_kept
        return max(1, n_pixels // 16)


def ohem_kept_mask(losses, probs, valid, threshold, min_kept):
    """Which pixels the mining rule keeps, on flat float arrays.

    Hard pixels (correct-class probability below threshold) are kept; when
    fewer than min_kept are hard, the min_kept highest-loss valid pixels are
    kept instead (ties broken toward lower flat index).
    """
    hard = valid & (probs < threshold)
    n_valid = int(valid.sum())
    min_kept = min(min_kept, n_valid)
    if int(hard.sum()) >= min_kept:
        return hard
    key = np.where(valid, losses, -np.inf)
    # lexsort: primary descending loss, secondary ascending index
    order = np.lexsort((np.arange(key.size), -key))
    kept = np.zeros_like(valid)
    kept[order[:min_kept]] = True
    return kept


def ohem_ce(logits, labels, w):
    """Mean cross entropy over the mined pixel set.

    logits: Tensor N x K x H x W; labels: int array N x H x W with values in
    [0, K) or w.ignore_label. The mined set is treated as constant in the
    backward pass.
    """
    labels = np.asarray(labels)
    n, k, h, hw = logits.shape
    if labels.shape != (n, h, hw):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    bad = (labels != w.ignore_label) & ((labels < 0) | (labels >= k))
    if np.any(bad):
        raise LabelError(f"labels outside [0,{k}) present: "
                         f"{np.unique(labels[bad])}")
    valid = (labels != w.ignore_label).reshape(-1)
    if not valid.any():
        raise DegenerateBatchError("no scorable pixels in batch")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    flat_logp = logp.transpose(0, 2, 3, 1).reshape(-1, k)
    lab = np.where(labels == w.ignore_label, 0, labels).reshape(-1)
    pix_loss = -flat_logp[np.arange(lab.size), lab]
    pix_prob = np.exp(-pix_loss)

    kept = ohem_kept_mask(pix_loss, pix_prob, valid,
                          w.ohem_threshold, w.min_kept_for(int(valid.sum())))
    n_kept = int(kept.sum())
    out = np.asarray(pix_loss[kept].mean())

    def back(g):
        soft = np.exp(flat_logp)
        d = soft.copy()
        d[np.arange(lab.size), lab] -= 1.0
        d *= (kept / n_kept)[:, None]
        d = d.reshape(n, h, hw, k).transpose(0, 3, 1, 2)
        return (d * g,)

    return record("ohem_ce", [logits], out, back)


def total_loss(pred, aux1, aux2, labels, w):
    """Main loss plus alpha/beta-weighted auxiliary-head losses."""
    loss = ohem_ce(pred, labels, w)
    if w.alpha:
        loss = add(loss, scale(ohem_ce(aux1, labels, w), w.alpha))
    if w.beta:
        loss = add(loss, scale(ohem_ce(aux2, labels, w), w.beta))
    return loss


class ConfusionMatrix:
    """Pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, n_classes, counts=None):
        self.n_classes = n_classes
        if counts is None:
            counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (n_classes, n_classes) or np.any(counts < 0):
            raise ShapeError("counts must be a non-negative KxK grid")
        self.counts = counts

    def update(self, predicted, truth, ignore_label=255):
        predicted = np.asarray(predicted).reshape(-1)
        truth = np.asarray(truth).reshape(-1)
        if predicted.shape != truth.shape:
            raise ShapeError("prediction/truth size mismatch")
        keep = truth != ignore_label
        predicted, truth = predicted[keep], truth[keep]
        k = self.n_classes
        if np.any((truth < 0) | (truth >= k)) or np.any((predicted < 0) | (predicted >= k)):
            raise LabelError("class index out of range in confusion update")
        np.add.at(self.counts, (truth, predicted), 1)
        return self

    def merge(self, other):
        if other.n_classes != self.n_classes:
            raise ShapeError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        return self

    @property
    def total(self):
        return int(self.counts.sum())


def miou(cm):
    """Per-class IoU (nan where the class never occurs) and their mean."""
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    present = denom > 0
    if not present.any():
        raise DegenerateMetricError("confusion matrix is empty")
    iou = np.full(cm.n_classes, np.nan)
    iou[present] = tp[present] / denom[present]
    return iou, float(iou[present].mean())
