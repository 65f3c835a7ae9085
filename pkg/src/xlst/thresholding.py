"""Recalled accuracy over confidence thresholds and automatic threshold selection."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

ABSTAIN = -1

DEFAULT_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99, 0.995, 0.999)
FALLBACK_ALPHA = 0.9


@dataclass(frozen=True)
class PredictionRecord:
    """Voter consensus for one sample.

    ``agreed_label`` is ABSTAIN unless every voter's argmax is the same class;
    ``min_confidence`` is the smallest voter probability for that class.
    """
    agreed_label: int
    min_confidence: float | None
    gold_label: int | None = None

    def __post_init__(self):
        if (self.agreed_label == ABSTAIN) != (self.min_confidence is None):
            raise ValueError("min_confidence must be set exactly when a label is agreed")

    @property
    def abstained(self):
        return self.agreed_label == ABSTAIN

    def recalled(self, t):
        return not self.abstained and self.min_confidence > t


def records_from_probs(probs, gold=None):
    """PredictionRecords from voter distributions of shape (n, M, C)."""
    probs = np.asarray(probs, dtype=np.float64)
    top = probs.argmax(axis=2)
    unanimous = np.all(top == top[:, :1], axis=1)
    out = []
    for i in range(probs.shape[0]):
        g = None if gold is None else int(gold[i])
        if unanimous[i]:
            j = int(top[i, 0])
            out.append(PredictionRecord(j, float(probs[i, :, j].min()), g))
        else:
            out.append(PredictionRecord(ABSTAIN, None, g))
    return out


def recalled_accuracy(records, t):
    """(accuracy, recall, n_recalled) over records with ``min_confidence > t``.

    Accuracy is None when nothing is recalled.
    """
    if not records:
        raise ValueError("recalled_accuracy needs at least one record")
    n_rec = correct = 0
    for r in records:
        if r.gold_label is None:
            raise ValueError("every record needs a gold label")
        if r.recalled(t):
            n_rec += 1
            correct += r.agreed_label == r.gold_label
    acc = correct / n_rec if n_rec else None
    return acc, n_rec / len(records), n_rec


@dataclass(frozen=True)
class ThresholdCurve:
    grid: tuple[float, ...]
    accuracy: tuple[float | None, ...]
    recall: tuple[float, ...]
    n_recalled: tuple[int, ...]

    def __len__(self):
        return len(self.grid)

    def to_csv(self):
        lines = ["threshold,accuracy,recall,n_recalled"]
        for t, a, r, n in zip(self.grid, self.accuracy, self.recall, self.n_recalled):
            lines.append(f"{t!r},{'' if a is None else repr(a)},{r!r},{n}")
        return "\n".join(lines) + "\n"


def threshold_curve(records, grid=DEFAULT_GRID):
    grid = tuple(float(t) for t in grid)
    if not grid:
        raise ValueError("threshold grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("threshold grid must be strictly increasing")
    if any(not 0.0 <= t < 1.0 for t in grid):
        raise ValueError("thresholds must lie in [0, 1)")
    points = [recalled_accuracy(records, t) for t in grid]
    return ThresholdCurve(grid, *(tuple(col) for col in zip(*points)))


def default_min_recalled(n_records):
    return max(10, math.ceil(0.01 * n_records))


def second_differences(ts, accs):
    """Divided-difference second derivative at each interior point."""
    out = []
    for i in range(1, len(ts) - 1):
        right = (accs[i + 1] - accs[i]) / (ts[i + 1] - ts[i])
        left = (accs[i] - accs[i - 1]) / (ts[i] - ts[i - 1])
        out.append(2.0 * (right - left) / (ts[i + 1] - ts[i - 1]))
    return out


def select_alpha(curve, min_recalled=10):
    """Grid point of maximal discrete second derivative of recalled accuracy.

    Only grid points with at least ``min_recalled`` recalled samples count; ties
    go to the smaller threshold. With fewer than three such points the
    fallback threshold 0.9 is returned.
    """
    if len(curve) == 0:
        raise ValueError("empty threshold curve")
    valid = [i for i in range(len(curve))
             if curve.n_recalled[i] >= min_recalled and curve.accuracy[i] is not None]
    if len(valid) < 3:
        return FALLBACK_ALPHA
    ts = [curve.grid[i] for i in valid]
    accs = [curve.accuracy[i] for i in valid]
    d2 = second_differences(ts, accs)
    best = max(range(len(d2)), key=lambda k: (d2[k], -k))
    return ts[best + 1]
