"""Evaluation metrics: box IOU, top-k accuracy and label agreement."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import BoundingBox


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two normalized boxes (0.0 when disjoint)."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return float(min(1.0, max(0.0, inter / union)))


def iou_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Vectorized IOU for two (N, 4) corner arrays ``[x_min, y_min, x_max, y_max]``."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if a.shape != b.shape:
        raise ValueError(f"box arrays differ in shape: {a.shape} vs {b.shape}")
    ix = np.clip(np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0.0, None)
    iy = np.clip(np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0.0, None)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a + area_b - inter
    out = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    return np.clip(out, 0.0, 1.0)


def mean_iou(a: np.ndarray, b: np.ndarray) -> float:
    vals = iou_arrays(a, b)
    return float(vals.mean()) if len(vals) else 0.0


def rank_classes(probs: np.ndarray) -> np.ndarray:
    """Class indices ordered by descending probability; ties go to the lower index."""
    probs = np.asarray(probs)
    # stable sort on the negated scores keeps lower indices first among ties
    return np.argsort(-probs, axis=-1, kind="stable")


def topk_accuracy(preds: Sequence, labels: Sequence[int], k: int) -> float:
    """Fraction of rows whose true class is among the ``k`` highest-scored classes."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.ndim != 2:
        raise ValueError(f"expected a 2-D prediction array, got shape {preds.shape}")
    if len(preds) != len(labels):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(labels)} labels")
    num_classes = preds.shape[1]
    if not 1 <= k <= num_classes:
        raise ValueError(f"k must be in [1, {num_classes}], got {k}")
    if len(labels) == 0:
        return 0.0
    top = rank_classes(preds)[:, :k]
    hits = (top == labels[:, None]).any(axis=1)
    return float(hits.mean())


def argmax_labels(probs: np.ndarray) -> np.ndarray:
    """Hard labels from probability rows, lower index wins ties."""
    return np.argmax(np.asarray(probs), axis=-1).astype(np.int64)


def agreement_rate(model_a_labels: Sequence[int], model_b_labels: Sequence[int]) -> float:
    a = np.asarray(model_a_labels).reshape(-1)
    b = np.asarray(model_b_labels).reshape(-1)
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) == 0:
        return 0.0
    return float((a == b).mean())
