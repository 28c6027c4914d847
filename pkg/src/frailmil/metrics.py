"""Classification metrics and inverse-frequency class weights."""

from __future__ import annotations

import logging

import numpy as np

logger = logging.getLogger(__name__)

N_CLASSES = 3


def _check(preds, labels):
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if preds.size == 0:
        raise ValueError("metrics need at least one prediction")
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions for {labels.size} labels")
    return preds, labels


def balanced_accuracy(preds, labels) -> float:
    """Mean recall over the classes present in ``labels``."""
    preds, labels = _check(preds, labels)
    recalls = [np.mean(preds[labels == c] == c) for c in np.unique(labels)]
    return float(np.mean(recalls))


def _f1_per_class(preds, labels, classes):
    scores = []
    for c in classes:
        tp = np.count_nonzero((preds == c) & (labels == c))
        fp = np.count_nonzero((preds == c) & (labels != c))
        fn = np.count_nonzero((preds != c) & (labels == c))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return np.asarray(scores, dtype=np.float64)


def macro_f1(preds, labels) -> float:
    """Unweighted mean F1 over the classes present in ``labels``."""
    preds, labels = _check(preds, labels)
    return float(np.mean(_f1_per_class(preds, labels, np.unique(labels))))


def weighted_f1(preds, labels) -> float:
    """Support-weighted F1 over the classes present in ``labels``."""
    preds, labels = _check(preds, labels)
    classes, support = np.unique(labels, return_counts=True)
    return float(np.average(_f1_per_class(preds, labels, classes), weights=support))


def class_weights(labels, n_classes: int = N_CLASSES) -> np.ndarray:
    """``w_c = N / (K * n_c)``; classes absent from ``labels`` get weight 0."""
    labels = np.asarray(labels, dtype=np.int64).ravel()
    counts = np.bincount(labels, minlength=n_classes)[:n_classes].astype(np.float64)
    n = counts.sum()
    weights = np.zeros(n_classes)
    present = counts > 0
    weights[present] = n / (n_classes * counts[present])
    if not present.all():
        logger.warning("class(es) %s absent from training labels; weight set to 0", np.flatnonzero(~present).tolist())
    return weights
