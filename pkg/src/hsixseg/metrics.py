"""Confusion-matrix accuracy metrics, computed in exact rational arithmetic."""

from fractions import Fraction

import numpy as np

from .data import IGNORE_LABEL


def confusion(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Count matrix with rows = reference class, columns = predicted class.

    Ignore-labelled pixels are excluded.
    """
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.shape != labels.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {labels.shape}")
    mask = labels != IGNORE_LABEL
    idx = labels[mask].astype(np.int64) * num_classes + pred[mask].astype(np.int64)
    cm = np.bincount(idx, minlength=num_classes * num_classes)
    return cm.reshape(num_classes, num_classes)


def _check(cm: np.ndarray) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    if int(cm.sum()) == 0:
        raise ValueError("confusion matrix is empty (no evaluated pixels)")
    return cm


def oa(cm: np.ndarray) -> float:
    """Overall accuracy: trace / total."""
    cm = _check(cm)
    return float(Fraction(int(np.trace(cm)), int(cm.sum())))


def producer_accuracy(cm: np.ndarray, cls: int) -> float:
    """Per-class recall: cm[i, i] / row_i. Absent class (empty row) -> nan."""
    cm = _check(cm)
    row = int(cm[cls].sum())
    if row == 0:
        return float("nan")
    return float(Fraction(int(cm[cls, cls]), row))


def aa(cm: np.ndarray) -> float:
    """Mean producer accuracy over classes that actually occur."""
    cm = _check(cm)
    accs = [Fraction(int(cm[i, i]), int(cm[i].sum()))
            for i in range(cm.shape[0]) if int(cm[i].sum()) > 0]
    return float(sum(accs) / len(accs))


def kappa(cm: np.ndarray) -> float:
    """Cohen's kappa: (p_o - p_e) / (1 - p_e), p_e from row/column marginals."""
    cm = _check(cm)
    total = int(cm.sum())
    p_o = Fraction(int(np.trace(cm)), total)
    p_e = sum(
        Fraction(int(cm[i].sum()), total) * Fraction(int(cm[:, i].sum()), total)
        for i in range(cm.shape[0])
    )
    if p_e == 1:
        return 1.0 if p_o == 1 else 0.0
    return float((p_o - p_e) / (1 - p_e))
