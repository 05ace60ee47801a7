"""Client-expert fitness scores maintained with an exponential moving average."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .errors import InvalidFeedback, InvalidParameter

ACC = "acc"
LOSS = "loss"
INDICATORS = (ACC, LOSS)


def indicator(kind: str, accuracy: float, loss: float, alpha_loss: float = 1.0) -> float:
    """Signal used for the EMA: the accuracy itself, or ``exp(-alpha_loss * loss)``."""
    if kind == ACC:
        return float(accuracy)
    if kind == LOSS:
        return math.exp(-alpha_loss * loss)
    raise InvalidParameter(f"unknown indicator {kind!r}")


@dataclass
class FitnessMatrix:
    Q: np.ndarray
    beta: float = 0.1
    kind: str = ACC
    alpha_loss: float = 1.0

    def __post_init__(self):
        if not 0 < self.beta <= 1:
            raise InvalidParameter(f"beta must be in (0, 1], got {self.beta}")
        if self.kind not in INDICATORS:
            raise InvalidParameter(f"unknown indicator {self.kind!r}")
        if not self.alpha_loss > 0:
            raise InvalidParameter("alpha_loss must be positive")

    @classmethod
    def init(cls, C: int, E: int, q0: float = 0.2, **kwargs) -> "FitnessMatrix":
        if C < 1 or E < 1:
            raise InvalidParameter(f"need C, E >= 1, got C={C}, E={E}")
        if not 0.0 <= q0 <= 1.0:
            raise InvalidParameter(f"q0 must be in [0, 1], got {q0}")
        return cls(np.full((C, E), float(q0)), **kwargs)

    def signal(self, accuracy: float, loss: float) -> float:
        return indicator(self.kind, accuracy, loss, self.alpha_loss)

    def update_pairs(self, signals: dict[tuple[int, int], float], allowed: dict[int, Iterable[int]]) -> None:
        """EMA update of the given ``(client, expert) -> signal`` pairs.

        ``allowed`` maps each client to the experts it was assigned this round; a pair outside
        it is rejected before anything is written. Entries not mentioned are left untouched.
        """
        allowed_sets = {c: set(es) for c, es in allowed.items()}
        for c, e in signals:
            if e not in allowed_sets.get(c, ()):
                raise InvalidFeedback(f"pair (client {c}, expert {e}) was not assigned this round")
        b = self.beta
        for (c, e), s in signals.items():
            self.Q[c, e] = (1.0 - b) * self.Q[c, e] + b * s

    def update(self, feedback, plan: dict[int, Iterable[int]]) -> None:
        """Apply one round of client feedback (a sequence of ``ClientFeedback``)."""
        signals = {}
        for fb in feedback:
            for e in fb.usage:
                signals[(fb.client_id, e)] = self.signal(fb.accuracy[e], fb.loss[e])
        self.update_pairs(signals, plan)
