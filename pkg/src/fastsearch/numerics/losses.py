"""Segmentation losses over (N,K,H,W) logit tensors."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, _make, log_softmax, mul, softmax, tsum


def pixel_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Per-pixel cross-entropy, shape (N,H,W)."""
    if logits.ndim != 4 or labels.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ValueError(f"logits {logits.shape} and labels {labels.shape} disagree")
    logp = log_softmax(logits, axis=1)
    onehot = np.zeros(logits.shape)
    np.put_along_axis(onehot, labels[:, None].astype(np.int64), 1.0, axis=1)
    return mul(tsum(mul(logp, onehot), axis=1), -1.0)


def ohem_cross_entropy(logits: Tensor, labels: np.ndarray, keep_fraction: float = 0.25) -> Tensor:
    """Mean cross-entropy over the hardest ``keep_fraction`` of pixels.

    Pixels are ranked by their own loss; ties keep the lower flat index so the
    selection is deterministic.
    """
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    per_pixel = pixel_cross_entropy(logits, labels)
    flat = per_pixel.data.ravel()
    k = int(np.ceil(keep_fraction * flat.size))
    if k == 0:
        raise ValueError("OHEM selection is empty")
    order = np.argsort(-flat, kind="stable")[:k]
    mask = np.zeros(flat.size)
    mask[order] = 1.0 / k
    return tsum(mul(per_pixel, mask.reshape(per_pixel.shape)))


def kl_distill(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    """Mean over pixels of KL(q_student || q_teacher) between class softmaxes."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"shape mismatch {student_logits.shape} vs {teacher_logits.shape}")
    log_qs = log_softmax(student_logits, axis=1)
    log_qt = log_softmax(teacher_logits, axis=1)
    qs = softmax(student_logits, axis=1)
    per_pixel = tsum(mul(qs, log_qs - log_qt), axis=1)
    n_pix = per_pixel.data.size
    return mul(tsum(per_pixel), 1.0 / n_pix)


def confusion(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    idx = labels.ravel().astype(np.int64) * num_classes + pred.ravel().astype(np.int64)
    return np.bincount(idx, minlength=num_classes**2).reshape(num_classes, num_classes)


def mean_iou(conf: np.ndarray) -> float:
    """Class-mean IoU; classes absent from both prediction and truth are skipped."""
    tp = np.diag(conf).astype(float)
    union = conf.sum(0) + conf.sum(1) - tp
    present = union > 0
    return float(np.mean(tp[present] / union[present])) if present.any() else 0.0


def segmentation_loss_value(logits: np.ndarray, labels: np.ndarray) -> float:
    """Plain mean cross-entropy on raw arrays (no graph), for logging."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(logp, labels[:, None].astype(np.int64), axis=1)
    return float(-picked.mean())
