"""Loss functions. Each returns ``(loss, d_loss/d_input)``.

Losses are means over the masked items in the batch.
"""

from __future__ import annotations

import numpy as np

from spatialvl.errors import ValidationError


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _nonempty(x, what):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValidationError(f"{what}: need a non-empty (N, K) array, got shape {x.shape}")
    return x


def cross_entropy(logits, labels, what="cross_entropy"):
    logits = _nonempty(logits, what)
    labels = np.asarray(labels)
    N, K = logits.shape
    if labels.shape != (N,):
        raise ValidationError(f"{what}: {labels.shape[0] if labels.ndim else 0} labels for {N} rows")
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= K:
        raise ValidationError(f"{what}: labels must be integers in 0..{K - 1}")
    lp = log_softmax(logits)
    rows = np.arange(N)
    loss = -lp[rows, labels].mean()
    d = np.exp(lp)
    d[rows, labels] -= 1.0
    return float(loss), d / N


def opr_loss(pred, target):
    """Mean over slots of the squared Euclidean distance between 5-vectors."""
    pred = _nonempty(pred, "opr_loss")
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValidationError(f"opr_loss: target shape {target.shape} != prediction {pred.shape}")
    diff = pred - target
    N = pred.shape[0]
    return float((diff * diff).sum() / N), 2.0 * diff / N


def src_loss(logits, labels):
    return cross_entropy(logits, labels, "src_loss")


def mlm_loss(logits, token_ids):
    return cross_entropy(logits, token_ids, "mlm_loss")


def matching_loss(scores, correct):
    """Softmax over each row of candidate scores against the correct index."""
    return cross_entropy(scores, correct, "matching_loss")


def _check_distributions(targets, shape, strictly_positive=False):
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != shape:
        raise ValidationError(f"mrc_loss: target shape {t.shape} != logits {shape}")
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-9):
        raise ValidationError("mrc_loss: targets must be probability distributions")
    if strictly_positive and np.any(t <= 0):
        raise ValidationError("mrc_loss: literal KL(P || target) needs strictly positive targets")
    return t


def mrc_loss(logits, targets, literal: bool = False):
    """KL(target || softmax(logits)) by default; ``literal`` flips to KL(P || target)."""
    logits = _nonempty(logits, "mrc_loss")
    N = logits.shape[0]
    t = _check_distributions(targets, logits.shape, strictly_positive=literal)
    lp = log_softmax(logits)
    p = np.exp(lp)
    if not literal:
        with np.errstate(divide="ignore"):
            lt = np.where(t > 0, np.log(np.where(t > 0, t, 1.0)), 0.0)
        loss = (t * (lt - lp)).sum() / N
        return float(loss), (p - t) / N
    a = lp - np.log(t)
    loss = (p * a).sum() / N
    d = p * (a - (p * a).sum(axis=1, keepdims=True))
    return float(loss), d / N


def mrfr_loss(pred, target):
    """Mean squared error over every coordinate of every masked slot."""
    pred = _nonempty(pred, "mrfr_loss")
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ValidationError(f"mrfr_loss: target shape {target.shape} != prediction {pred.shape}")
    diff = pred - target
    return float((diff * diff).mean()), 2.0 * diff / diff.size


def iou_regression_loss(pred, target):
    """Squared error on a scalar IoU prediction, for the regression SRC variant."""
    pred = _nonempty(pred, "iou_regression_loss")
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    diff = pred - target
    return float((diff * diff).mean()), 2.0 * diff / diff.size
