"""Classification, retrieval and correlation metrics used by the evaluation tasks."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DegenerateCell, KOutOfRange, LengthMismatch


def confusion_counts(y_true, y_pred, labels=None) -> tuple[list, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-class TP, FP, FN and support, over ``labels`` (default: union of both sequences)."""
    y_true, y_pred = list(y_true), list(y_pred)
    if len(y_true) != len(y_pred):
        raise LengthMismatch("y_true and y_pred differ in length")
    if labels is None:
        labels = sorted(set(y_true) | set(y_pred))
    index = {lab: i for i, lab in enumerate(labels)}
    k = len(labels)
    tp, fp, fn, support = (np.zeros(k, dtype=np.int64) for _ in range(4))
    for t, p in zip(y_true, y_pred):
        ti, pi = index.get(t), index.get(p)
        if ti is not None:
            support[ti] += 1
        if t == p and ti is not None:
            tp[ti] += 1
        else:
            if pi is not None:
                fp[pi] += 1
            if ti is not None:
                fn[ti] += 1
    return list(labels), tp, fp, fn, support


def per_class_f1(y_true, y_pred, labels=None) -> dict:
    labels, tp, fp, fn, _ = confusion_counts(y_true, y_pred, labels)
    out = {}
    for lab, a, b, c in zip(labels, tp, fp, fn):
        prec = a / (a + b) if a + b else 0.0
        rec = a / (a + c) if a + c else 0.0
        out[lab] = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return out


def classification_scores(y_true, y_pred, labels=None) -> dict:
    """Macro-F1, weighted-F1 and accuracy with the 0/0 -> 0 convention."""
    labels, tp, _, _, support = confusion_counts(y_true, y_pred, labels)
    f1 = per_class_f1(y_true, y_pred, labels)
    f1v = np.array([f1[lab] for lab in labels])
    n = len(list(y_true))
    return {
        "macro_f1": float(f1v.mean()) if len(labels) else 0.0,
        "weighted_f1": float((support * f1v).sum() / support.sum()) if support.sum() else 0.0,
        "accuracy": float(tp.sum() / n) if n else 0.0,
        "per_class_f1": {str(k): float(v) for k, v in f1.items()},
    }


def macro_f1(y_true, y_pred, labels=None) -> float:
    return classification_scores(y_true, y_pred, labels)["macro_f1"]


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Top-k class indices per row; ties go to the lower class index."""
    scores = np.asarray(scores, dtype=np.float64)
    order = np.lexsort((np.broadcast_to(np.arange(scores.shape[1]), scores.shape), -scores), axis=1)
    return order[:, :k]


def recall_at_k(y_true: Sequence[int], scores, k: int) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y_true, dtype=np.int64)
    if scores.ndim != 2 or scores.shape[0] != len(y):
        raise LengthMismatch("scores must be [n_samples, n_classes] aligned with y_true")
    if k < 1 or k > scores.shape[1]:
        raise KOutOfRange(f"k={k} with {scores.shape[1]} classes")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    if len(y) == 0:
        return 0.0
    hits = (top_k_indices(scores, k) == y[:, None]).any(axis=1)
    return float(hits.mean())


def pearson(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise LengthMismatch("vectors differ in length")
    dx, dy = x - x.mean(), y - y.mean()
    denom = np.sqrt((dx**2).sum()) * np.sqrt((dy**2).sum())
    if denom == 0:
        raise DegenerateCell("Pearson correlation of a constant vector")
    return float((dx * dy).sum() / denom)


def cosine(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise LengthMismatch("vectors differ in length")
    denom = np.sqrt((x**2).sum()) * np.sqrt((y**2).sum())
    if denom == 0:
        raise DegenerateCell("cosine similarity of a zero vector")
    return float((x * y).sum() / denom)


def mean_rowwise(metric, truth_rows, pred_rows) -> tuple[float, int]:
    """Average a per-row metric, skipping degenerate rows; returns (mean, n_skipped)."""
    values, skipped = [], 0
    for t, p in zip(truth_rows, pred_rows):
        try:
            values.append(metric(t, p))
        except DegenerateCell:
            skipped += 1
    if not values:
        raise DegenerateCell("every row was degenerate")
    return float(np.mean(values)), skipped
