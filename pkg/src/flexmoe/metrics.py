"""Expert utilization balance (CV and max-min gap over a sliding window) and accuracy summaries."""

from __future__ import annotations

from collections import deque
from typing import Sequence

import numpy as np

from .errors import InvalidParameter


class UsageHistory:
    """Per-round, per-expert usage totals; keeps at most ``capacity`` most recent rounds."""

    def __init__(self, E: int, capacity: int | None = None):
        self.E = E
        self.rounds: deque[np.ndarray] = deque(maxlen=capacity)
        self.completed = 0

    def append(self, usage: Sequence[float]) -> None:
        u = np.asarray(usage, dtype=float)
        if u.shape != (self.E,) or np.any(u < 0):
            raise InvalidParameter("usage must be a nonnegative vector with one entry per expert")
        self.rounds.append(u)
        self.completed += 1

    def window_load(self, t: int | None = None, w: int = 1) -> np.ndarray:
        """Sum of usage over rounds ``max(1, t-w+1) .. t`` (1-based; default ``t`` is the latest)."""
        t = self.completed if t is None else t
        if t < 1 or w < 1:
            raise InvalidParameter("need t >= 1 and w >= 1")
        if t > self.completed:
            raise InvalidParameter(f"round {t} has not completed")
        first_kept = self.completed - len(self.rounds) + 1
        start = max(1, t - w + 1)
        if start < first_kept:
            raise InvalidParameter("window reaches past the retained history")
        out = np.zeros(self.E)
        for r in range(start, t + 1):
            out += self.rounds[r - first_kept]
        return out


def cv(loads: Sequence[float]) -> float:
    """Population standard deviation over mean; 0 when the mean is 0."""
    x = np.asarray(loads, dtype=float)
    if x.size == 0:
        return 0.0
    mean = x.mean()
    if mean == 0:
        return 0.0
    return float(x.std() / mean)


def maxmin_gap(loads: Sequence[float]) -> float:
    x = np.asarray(loads, dtype=float)
    if x.size == 0:
        raise InvalidParameter("empty load vector")
    return float(x.max() - x.min())


def mean_client_accuracy(accuracies: Sequence[float]) -> float:
    x = np.asarray(accuracies, dtype=float)
    if x.size == 0:
        raise InvalidParameter("no client accuracies")
    return float(x.mean())
