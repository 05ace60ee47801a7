"""Client-side MoE model and the two local-training backends.

The model is deliberately tiny: a shared affine extractor ``f = A x + a`` (d -> h),
a per-client gate ``z = G f + g`` (h -> E) and experts ``o_e = B_e f + b_e`` (h -> K).
The prediction is the softmax-gated mixture of the assigned experts' logits.
Every parameter group is stored as a flat vector; :class:`ModelShape` knows the layout.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import Dataset
from .errors import DimensionMismatch, InvalidAssignment, InvalidParameter, NumericalFailure

TINY = "tiny"
ORACLE = "oracle"
BACKENDS = (TINY, ORACLE)


@dataclass(frozen=True)
class ModelShape:
    d: int
    h: int
    K: int
    E: int

    @property
    def p_extractor(self) -> int:
        return self.h * self.d + self.h

    @property
    def p_expert(self) -> int:
        return self.K * self.h + self.K

    @property
    def p_gating(self) -> int:
        return self.E * self.h + self.E

    def split_extractor(self, v: np.ndarray):
        return v[: self.h * self.d].reshape(self.h, self.d), v[self.h * self.d :]

    def split_expert(self, v: np.ndarray):
        return v[: self.K * self.h].reshape(self.K, self.h), v[self.K * self.h :]

    def split_gating(self, v: np.ndarray):
        return v[: self.E * self.h].reshape(self.E, self.h), v[self.E * self.h :]


@dataclass
class GlobalModel:
    shape: ModelShape
    extractor: np.ndarray
    experts: np.ndarray  # (E, p_expert)

    def __post_init__(self):
        if self.extractor.shape != (self.shape.p_extractor,):
            raise DimensionMismatch("extractor vector has the wrong length")
        if self.experts.shape != (self.shape.E, self.shape.p_expert):
            raise DimensionMismatch("expert matrix has the wrong shape")

    @classmethod
    def init(cls, shape: ModelShape, seed: int) -> "GlobalModel":
        rng = np.random.default_rng(seed)
        A = rng.normal(0.0, 1.0 / math.sqrt(shape.d), (shape.h, shape.d))
        ext = np.concatenate([A.ravel(), np.zeros(shape.h)])
        experts = np.stack([
            np.concatenate([rng.normal(0.0, 1.0 / math.sqrt(shape.h), (shape.K, shape.h)).ravel(), np.zeros(shape.K)])
            for _ in range(shape.E)
        ])
        return cls(shape, ext, experts)

    def expert(self, e: int) -> np.ndarray:
        return self.experts[e]

    def download(self, assigned: Sequence[int]) -> "ModelDownload":
        """What a client receives: the extractor plus copies of its assigned experts only."""
        return ModelDownload(self.shape, self.extractor.copy(), {int(e): self.experts[e].copy() for e in assigned})

    def copy(self) -> "GlobalModel":
        return GlobalModel(self.shape, self.extractor.copy(), self.experts.copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.extractor)) and np.all(np.isfinite(self.experts)))


@dataclass
class ModelDownload:
    shape: ModelShape
    extractor: np.ndarray
    experts: dict[int, np.ndarray]

    def expert(self, e: int) -> np.ndarray:
        try:
            return self.experts[e]
        except KeyError:
            raise InvalidAssignment(f"expert {e} was not downloaded") from None


@dataclass
class ClientState:
    client_id: int
    gating: np.ndarray

    @classmethod
    def init(cls, shape: ModelShape, client_id: int, seed: int) -> "ClientState":
        rng = np.random.default_rng([seed, client_id])
        G = rng.normal(0.0, 1.0 / math.sqrt(shape.h), (shape.E, shape.h))
        return cls(client_id, np.concatenate([G.ravel(), np.zeros(shape.E)]))


@dataclass
class TrainerConfig:
    local_rounds: int = 3
    lr: float = 0.1
    backend: str = TINY
    affinity: np.ndarray | None = None  # (C, E), oracle backend only
    noise: float = 0.0

    def __post_init__(self):
        if self.local_rounds < 1:
            raise InvalidParameter("local_rounds must be >= 1")
        if not self.lr > 0:
            raise InvalidParameter("lr must be positive")
        if self.backend not in BACKENDS:
            raise InvalidParameter(f"unknown backend {self.backend!r}")
        if self.noise < 0:
            raise InvalidParameter("noise must be nonnegative")
        if self.backend == ORACLE:
            if self.affinity is None:
                raise InvalidParameter("oracle backend needs an affinity matrix")
            A = np.asarray(self.affinity, dtype=float)
            if A.ndim != 2 or np.any(A < 0) or np.any(A > 1):
                raise InvalidParameter("affinity must be a 2-D matrix with entries in [0, 1]")
            self.affinity = A


@dataclass
class ClientFeedback:
    """Per assigned expert: usage count, accuracy and loss, plus parameter deltas."""

    client_id: int
    num_samples: int
    usage: dict[int, int]
    accuracy: dict[int, float]
    loss: dict[int, float]
    extractor_delta: np.ndarray
    expert_deltas: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def assigned(self) -> tuple[int, ...]:
        return tuple(sorted(self.usage))


def _check_assigned(assigned, E: int) -> tuple[int, ...]:
    ids = tuple(sorted(int(e) for e in assigned))
    if not ids:
        raise InvalidAssignment("assigned expert set is empty")
    if len(set(ids)) != len(ids) or ids[0] < 0 or ids[-1] >= E:
        raise InvalidAssignment(f"invalid expert ids {list(assigned)} for E={E}")
    return ids


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return ez / ez.sum(axis=1, keepdims=True)


def forward(shape: ModelShape, extractor, experts, gating, assigned: Sequence[int], X: np.ndarray):
    """Forward pass over the assigned subset.

    ``experts`` is a sequence aligned with ``assigned``. Returns a dict with features ``f``,
    gate weights ``gate`` (n, k), expert logits ``out`` (k, n, K) and mixture logits ``logits``.
    """
    A, a = shape.split_extractor(extractor)
    G, g = shape.split_gating(gating)
    idx = list(assigned)
    f = X @ A.T + a
    gate = _softmax_rows(f @ G[idx].T + g[idx])
    out = np.stack([f @ B.T + b for B, b in (shape.split_expert(t) for t in experts)])
    logits = np.einsum("nk,knj->nj", gate, out)
    return {"f": f, "gate": gate, "out": out, "logits": logits}


def _per_sample_ce(logits: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    m = logits.max(axis=1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(y)), y], np.exp(logp)


def loss_and_grads(shape: ModelShape, extractor, experts, gating, assigned: Sequence[int], X, y):
    """Mean cross-entropy and its gradients w.r.t. extractor, each assigned expert and gating.

    The gating gradient is zero outside the assigned rows.
    """
    cache = forward(shape, extractor, experts, gating, assigned, X)
    f, gate, out = cache["f"], cache["gate"], cache["out"]
    losses, probs = _per_sample_ce(cache["logits"], y)
    n = len(y)
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n

    A, _ = shape.split_extractor(extractor)
    G, _ = shape.split_gating(gating)
    idx = list(assigned)

    g_experts = []
    df = np.zeros_like(f)
    dgate = np.einsum("nj,knj->nk", dlogits, out)
    for j, theta in enumerate(experts):
        B, _ = shape.split_expert(theta)
        weighted = gate[:, j : j + 1] * dlogits
        g_experts.append(np.concatenate([(weighted.T @ f).ravel(), weighted.sum(axis=0)]))
        df += weighted @ B
    dz = gate * (dgate - (gate * dgate).sum(axis=1, keepdims=True))
    dG = np.zeros((shape.E, shape.h))
    dg = np.zeros(shape.E)
    dG[idx] = dz.T @ f
    dg[idx] = dz.sum(axis=0)
    df += dz @ G[idx]
    g_extractor = np.concatenate([(df.T @ X).ravel(), df.sum(axis=0)])
    g_gating = np.concatenate([dG.ravel(), dg])
    return float(losses.mean()), g_extractor, g_experts, g_gating


def _largest_remainder(total: int, weights: np.ndarray) -> np.ndarray:
    if weights.sum() <= 0:
        weights = np.ones_like(weights)
    quotas = total * weights / weights.sum()
    counts = np.floor(quotas).astype(np.int64)
    short = total - int(counts.sum())
    order = sorted(range(len(weights)), key=lambda j: (-(quotas[j] - counts[j]), j))
    for j in order[:short]:
        counts[j] += 1
    return counts


def local_train(model, state: ClientState, assigned, data: Dataset, cfg: TrainerConfig, seed: int):
    """Run ``cfg.local_rounds`` full-batch passes and return ``(feedback, new_state)``.

    ``model`` may be a :class:`GlobalModel` or a :class:`ModelDownload`; only the extractor
    and the assigned experts are read.
    """
    shape = model.shape
    ids = _check_assigned(assigned, shape.E)
    if cfg.backend == ORACLE:
        return _oracle_feedback(shape, state, ids, len(data), cfg, seed), state

    psi0 = np.array(model.extractor, dtype=float)
    thetas0 = [np.array(model.expert(e), dtype=float) for e in ids]
    psi, thetas, phi = psi0.copy(), [t.copy() for t in thetas0], state.gating.copy()
    X, y = data.features, data.labels
    usage = np.zeros(len(ids), dtype=np.int64)
    accuracy: dict[int, float] = {}
    loss_out: dict[int, float] = {}
    ln_k = math.log(shape.K)

    for r in range(cfg.local_rounds):
        if len(y):
            cache = forward(shape, psi, thetas, phi, ids, X)
            route = np.argmax(cache["gate"], axis=1)
            usage += np.bincount(route, minlength=len(ids))
            if r == cfg.local_rounds - 1:
                per_loss, _ = _per_sample_ce(cache["logits"], y)
                correct = np.argmax(cache["logits"], axis=1) == y
                for j, e in enumerate(ids):
                    mask = route == j
                    if mask.any():
                        accuracy[e] = float(correct[mask].mean())
                        loss_out[e] = float(per_loss[mask].mean())
            loss, g_psi, g_thetas, g_phi = loss_and_grads(shape, psi, thetas, phi, ids, X, y)
            if not math.isfinite(loss):
                raise NumericalFailure(f"client {state.client_id}: non-finite loss in local round {r + 1}")
            psi -= cfg.lr * g_psi
            thetas = [t - cfg.lr * g for t, g in zip(thetas, g_thetas)]
            phi -= cfg.lr * g_phi
    for e in ids:
        accuracy.setdefault(e, 0.0)
        loss_out.setdefault(e, ln_k)
    if not (np.all(np.isfinite(psi)) and np.all(np.isfinite(phi))):
        raise NumericalFailure(f"client {state.client_id}: non-finite parameters")

    feedback = ClientFeedback(
        client_id=state.client_id,
        num_samples=len(y),
        usage={e: int(u) for e, u in zip(ids, usage)},
        accuracy=accuracy,
        loss=loss_out,
        extractor_delta=psi - psi0,
        expert_deltas={e: t - t0 for e, t, t0 in zip(ids, thetas, thetas0)},
    )
    return feedback, ClientState(state.client_id, phi)


def _oracle_feedback(shape: ModelShape, state: ClientState, ids, n: int, cfg: TrainerConfig, seed: int):
    c = state.client_id
    aff = cfg.affinity[c, list(ids)]
    usage = _largest_remainder(cfg.local_rounds * n, aff)
    rng = np.random.default_rng(seed)
    noisy = aff + (rng.normal(0.0, cfg.noise, len(ids)) if cfg.noise > 0 else 0.0)
    acc = np.clip(noisy, 0.0, 1.0)
    return ClientFeedback(
        client_id=c,
        num_samples=n,
        usage={e: int(u) for e, u in zip(ids, usage)},
        accuracy={e: float(a) for e, a in zip(ids, acc)},
        loss={e: -math.log(max(float(a), 1e-6)) for e, a in zip(ids, acc)},
        extractor_delta=np.zeros(shape.p_extractor),
        expert_deltas={e: np.zeros(shape.p_expert) for e in ids},
    )


def evaluate(model, state: ClientState, assigned, data: Dataset) -> float:
    ids = _check_assigned(assigned, model.shape.E)
    if len(data) == 0:
        return 0.0
    cache = forward(model.shape, model.extractor, [model.expert(e) for e in ids], state.gating, ids, data.features)
    return float(np.mean(np.argmax(cache["logits"], axis=1) == data.labels))


def save_checkpoint(path: str | Path, model: GlobalModel, states: Mapping[int, ClientState] | None = None) -> None:
    """Write parameters as CSV rows ``kind,index,v0,v1,...`` after a one-line header.

    The header is ``# p_psi=..,p_theta=..,p_phi=..,E=..,d=..,h=..,K=..``; kinds are
    ``psi`` (index 0), ``theta`` (expert id) and ``phi`` (client id).
    """
    s = model.shape
    lines = [f"# p_psi={s.p_extractor},p_theta={s.p_expert},p_phi={s.p_gating},E={s.E},d={s.d},h={s.h},K={s.K}"]
    fmt = lambda v: ",".join(repr(float(x)) for x in v)  # noqa: E731
    lines.append(f"psi,0,{fmt(model.extractor)}")
    for e in range(s.E):
        lines.append(f"theta,{e},{fmt(model.experts[e])}")
    for c in sorted(states or {}):
        lines.append(f"phi,{c},{fmt(states[c].gating)}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | Path) -> tuple[GlobalModel, dict[int, ClientState]]:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("#"):
        raise InvalidParameter(f"{path}: missing checkpoint header")
    head = dict(kv.split("=") for kv in text[0][1:].strip().split(","))
    shape = ModelShape(int(head["d"]), int(head["h"]), int(head["K"]), int(head["E"]))
    if (int(head["p_psi"]), int(head["p_theta"]), int(head["p_phi"])) != (
        shape.p_extractor, shape.p_expert, shape.p_gating,
    ):
        raise DimensionMismatch(f"{path}: header sizes disagree with the shape")
    psi, experts, states = None, np.zeros((shape.E, shape.p_expert)), {}
    for line in text[1:]:
        kind, idx, *vals = line.split(",")
        v = np.array([float(x) for x in vals])
        if kind == "psi":
            psi = v
        elif kind == "theta":
            experts[int(idx)] = v
        elif kind == "phi":
            states[int(idx)] = ClientState(int(idx), v)
    if psi is None:
        raise InvalidParameter(f"{path}: no extractor row")
    return GlobalModel(shape, psi, experts), states
