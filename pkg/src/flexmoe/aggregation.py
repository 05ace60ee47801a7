"""Server-side merge of client updates.

The extractor is averaged with data-size weights (FedAvg); every expert is averaged with
the usage counts reported by the clients that trained it. Sums run in ascending client id
so repeated runs are bit-identical.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DimensionMismatch, EmptyRound
from .model import ClientFeedback, GlobalModel


def _ordered(uploads: Sequence[ClientFeedback]) -> list[ClientFeedback]:
    return sorted(uploads, key=lambda fb: fb.client_id)


def aggregate_extractor(uploads: Sequence[ClientFeedback]) -> np.ndarray:
    if not uploads:
        raise EmptyRound("no participating clients this round")
    ups = _ordered(uploads)
    total = float(sum(fb.num_samples for fb in ups))
    out = np.zeros_like(ups[0].extractor_delta, dtype=float)
    for fb in ups:
        out += (fb.num_samples / total) * fb.extractor_delta
    return out


def aggregate_expert(e: int, uploads: Sequence[ClientFeedback], p_expert: int) -> np.ndarray:
    """Usage-weighted mean of the deltas for expert ``e``; zero when nobody used it."""
    ups = [fb for fb in _ordered(uploads) if e in fb.usage]
    total = sum(fb.usage[e] for fb in ups)
    out = np.zeros(p_expert)
    if total <= 0:
        return out
    for fb in ups:
        if fb.usage[e]:
            out += (fb.usage[e] / total) * fb.expert_deltas[e]
    return out


def aggregate(uploads: Sequence[ClientFeedback], E: int, p_expert: int):
    """Return ``(extractor_delta, [expert_delta for e in range(E)])``."""
    return aggregate_extractor(uploads), [aggregate_expert(e, uploads, p_expert) for e in range(E)]


def apply(model: GlobalModel, extractor_delta: np.ndarray, expert_deltas) -> GlobalModel:
    expert_deltas = np.asarray(expert_deltas, dtype=float)
    if extractor_delta.shape != model.extractor.shape or expert_deltas.shape != model.experts.shape:
        raise DimensionMismatch("update shape does not match the global model")
    return GlobalModel(model.shape, model.extractor + extractor_delta, model.experts + expert_deltas)
