"""Segmentation metrics from a confusion matrix.

All three metrics are clamped into (0, 1] so downstream geometric means
stay defined even for degenerate predictions.
"""

from __future__ import annotations

METRIC_FLOOR = 1e-6


def confusion_matrix(truth, prediction, num_classes: int) -> list[list[int]]:
    """counts[t][p] = pixels of class t predicted as p.  Inputs are flat
    iterables of equal length."""
    truth = list(truth)
    prediction = list(prediction)
    if len(truth) != len(prediction):
        raise ValueError(f"length mismatch: {len(truth)} vs {len(prediction)}")
    counts = [[0] * num_classes for _ in range(num_classes)]
    for t, p in zip(truth, prediction):
        counts[t][p] += 1
    return counts


def _clamp(value: float) -> float:
    return min(1.0, max(METRIC_FLOOR, value))


def segmentation_metrics(counts) -> tuple[float, float, float]:
    """(mIoU, mean accuracy, frequency-weighted IoU) over the classes that
    appear in the matrix.  Classes absent from both truth and prediction are
    skipped rather than averaged in as zeros."""
    n = len(counts)
    total = sum(sum(row) for row in counts)
    if total == 0:
        raise ValueError("empty confusion matrix")

    ious, accs, fw = [], [], 0.0
    for c in range(n):
        row = sum(counts[c])
        col = sum(counts[t][c] for t in range(n))
        hit = counts[c][c]
        union = row + col - hit
        if union > 0:
            ious.append(hit / union)
        if row > 0:
            accs.append(hit / row)
            fw += (row / total) * (hit / union if union else 0.0)
    if not ious or not accs:
        raise ValueError("confusion matrix covers no classes")
    miou = sum(ious) / len(ious)
    mean_acc = sum(accs) / len(accs)
    return _clamp(miou), _clamp(mean_acc), _clamp(fw)
