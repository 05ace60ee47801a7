"""The federated round loop: assignment, local training, upload, aggregation."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import aggregation
from .assignment import (
    AssignmentPlan,
    LoadLedger,
    assign_greedy,
    assign_random,
    build_instance,
    solve_flex,
    target_load,
)
from .data import (
    ClientPartition,
    Dataset,
    generate_clustered_dataset,
    partition_classes,
    partition_dirichlet,
    partition_iid,
    train_test_split,
)
from .errors import ConfigError, FlexMoEError, RoundFailed
from .fitness import INDICATORS, FitnessMatrix
from .metrics import UsageHistory, cv, maxmin_gap, mean_client_accuracy
from .model import (
    BACKENDS,
    ORACLE,
    ClientState,
    GlobalModel,
    ModelShape,
    TrainerConfig,
    evaluate,
    local_train,
)

STRATEGIES = ("random", "greedy", "flex")
PARTITIONS = ("iid", "dirichlet", "classes")
AFFINITIES = ("block", "random")

# independent RNG streams, combined with (seed, round, client) where relevant
_DATA, _PARTITION, _SPLIT, _CAPACITY, _MODEL, _GATING = 1, 2, 3, 4, 5, 6
_PARTICIPATION, _RANDOM_PLAN, _TIE_NOISE, _TRAIN, _AFFINITY = 7, 8, 9, 10, 11


@dataclass
class ExperimentConfig:
    """All experiment parameters. ``window = 0`` means the whole run (``T_max``)."""

    C: int = 20
    E: int = 8
    T_max: int = 100
    R: int = 3
    seed: int = 0
    k_min: int = 2
    k_max: int = 6
    strategy: str = "flex"
    indicator: str = "acc"
    backend: str = "tiny"
    partition: str = "iid"
    dirichlet_alpha: float = 0.8
    classes_per_client: int = 4
    n_samples: int = 2000
    dim: int = 16
    num_classes: int = 10
    cluster_spread: float = 1.0
    hidden: int = 8
    test_fraction: float = 0.2
    lr: float = 0.1
    q0: float = 0.2
    beta: float = 0.1
    alpha_loss: float = 1.0
    gamma: float = 0.1
    alpha_adj: float = 1.0
    delta_ratio: float = 0.1
    window: int = 0
    participation: float = 1.0
    affinity: str = "block"
    affinity_blocks: int = 4
    affinity_high: float = 0.9
    affinity_low: float = 0.1
    oracle_noise: float = 0.0
    node_limit: int = 200
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(ok: bool, key: str, why: str):
            if not ok:
                raise ConfigError(why, key)

        need(self.C >= 1, "C", "must be >= 1")
        need(self.E >= 1, "E", "must be >= 1")
        need(self.T_max >= 1, "T_max", "must be >= 1")
        need(self.R >= 1, "R", "must be >= 1")
        need(1 <= self.k_min, "k_min", "must be >= 1")
        need(self.k_min <= self.k_max, "k_min", f"k_min={self.k_min} exceeds k_max={self.k_max}")
        need(self.k_max <= self.E, "k_max", f"k_max={self.k_max} exceeds E={self.E}")
        need(self.strategy in STRATEGIES, "strategy", f"must be one of {STRATEGIES}")
        need(self.indicator in INDICATORS, "indicator", f"must be one of {INDICATORS}")
        need(self.backend in BACKENDS, "backend", f"must be one of {BACKENDS}")
        need(self.partition in PARTITIONS, "partition", f"must be one of {PARTITIONS}")
        need(self.affinity in AFFINITIES, "affinity", f"must be one of {AFFINITIES}")
        need(self.dirichlet_alpha > 0, "dirichlet_alpha", "must be positive")
        if self.partition == "classes":
            need(1 <= self.classes_per_client <= self.num_classes, "classes_per_client", "must be in [1, num_classes]")
        need(self.n_samples >= max(self.C, self.num_classes), "n_samples", "must be >= max(C, num_classes)")
        need(self.dim >= 1 and self.hidden >= 1, "dim", "dim and hidden must be >= 1")
        need(self.num_classes >= 1, "num_classes", "must be >= 1")
        need(self.cluster_spread > 0, "cluster_spread", "must be positive")
        need(0 <= self.test_fraction < 1, "test_fraction", "must be in [0, 1)")
        need(self.lr > 0, "lr", "must be positive")
        need(0 <= self.q0 <= 1, "q0", "must be in [0, 1]")
        need(0 < self.beta <= 1, "beta", "must be in (0, 1]")
        need(self.alpha_loss > 0, "alpha_loss", "must be positive")
        need(0 < self.gamma <= 1, "gamma", "must be in (0, 1]")
        need(self.alpha_adj >= 0, "alpha_adj", "must be nonnegative")
        need(self.delta_ratio >= 0, "delta_ratio", "must be nonnegative")
        need(self.window >= 0, "window", "must be >= 0")
        need(0 < self.participation <= 1, "participation", "must be in (0, 1]")
        need(self.participation * self.C >= 1, "participation", "participation * C must be >= 1")
        need(self.affinity_blocks >= 1, "affinity_blocks", "must be >= 1")
        need(0 <= self.affinity_low <= 1 and 0 <= self.affinity_high <= 1, "affinity_high", "affinities must be in [0, 1]")
        need(self.oracle_noise >= 0, "oracle_noise", "must be nonnegative")
        need(self.node_limit >= 1, "node_limit", "must be >= 1")
        need(self.threads >= 1, "threads", "must be >= 1")

    @property
    def effective_window(self) -> int:
        return self.window or self.T_max

    @property
    def participants_per_round(self) -> int:
        return min(self.C, math.ceil(self.participation * self.C - 1e-9))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def block_affinity(C: int, E: int, blocks: int, high: float, low: float, sizes=None) -> np.ndarray:
    """Block-diagonal affinity: ``high`` inside a client's block of experts, ``low`` elsewhere.

    Experts are split into ``blocks`` contiguous groups. Clients are spread over the blocks
    largest-first onto the block with the least data so far, which keeps block data totals
    close when ``sizes`` differ; without sizes clients are dealt round-robin.
    """
    blocks = min(blocks, E, C)
    expert_block = np.arange(E) * blocks // E
    client_block = np.zeros(C, dtype=np.int64)
    if sizes is None:
        client_block = np.arange(C) % blocks
    else:
        totals = np.zeros(blocks)
        counts = np.zeros(blocks, dtype=np.int64)
        for c in sorted(range(C), key=lambda c: (-sizes[c], c)):
            b = min(range(blocks), key=lambda b: (totals[b], counts[b], b))
            client_block[c] = b
            totals[b] += sizes[c]
            counts[b] += 1
    return np.where(client_block[:, None] == expert_block[None, :], high, low)


@dataclass
class RoundRecord:
    round: int
    participants: list[int]
    plan: AssignmentPlan
    tau: float
    assignment_loads: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    relaxation_level: int
    objective: float
    feedback: dict[int, dict[int, tuple[int, float, float]]]
    usage: np.ndarray
    window_load: np.ndarray
    mean_acc: float
    cv: float
    gap: float
    Q: np.ndarray = field(repr=False, default=None)


@dataclass
class ExperimentState:
    cfg: ExperimentConfig
    dataset: Dataset
    train: list[Dataset]
    test: list[Dataset]
    sizes: np.ndarray
    capacities: np.ndarray
    model: GlobalModel
    clients: dict[int, ClientState]
    fitness: FitnessMatrix
    ledger: LoadLedger
    history: UsageHistory
    trainer_cfg: TrainerConfig
    trainer: Callable = local_train
    prev_plan: AssignmentPlan | None = None
    prev_feedback: list = field(default_factory=list)
    prev_tau: float = 0.0
    last_assigned: dict[int, tuple[int, ...]] = field(default_factory=dict)
    last_accuracy: dict[int, float] = field(default_factory=dict)
    records: list[RoundRecord] = field(default_factory=list)
    instance_hook: Callable | None = None


def make_partition(cfg: ExperimentConfig, ds: Dataset) -> ClientPartition:
    seed = [cfg.seed, _PARTITION]
    if cfg.partition == "iid":
        return partition_iid(ds, cfg.C, seed)
    if cfg.partition == "dirichlet":
        return partition_dirichlet(ds, cfg.C, cfg.dirichlet_alpha, seed)
    return partition_classes(ds, cfg.C, cfg.classes_per_client, seed)


def init_state(cfg: ExperimentConfig, trainer: Callable = local_train, affinity: np.ndarray | None = None) -> ExperimentState:
    """Build data, partitions, capacities, models and server tables for a run.

    Everything strategy-independent is derived from ``cfg.seed`` alone, so runs that differ
    only in strategy share data, partition, capacities and initial parameters.
    """
    ds = generate_clustered_dataset(cfg.n_samples, cfg.dim, cfg.num_classes, cfg.cluster_spread, [cfg.seed, _DATA])
    part = make_partition(cfg, ds)
    train_part, test_part = train_test_split(part, cfg.test_fraction, [cfg.seed, _SPLIT])
    train = [ds.subset(ix) for ix in train_part.indices]
    test = [ds.subset(ix) for ix in test_part.indices]
    sizes = train_part.sizes
    capacities = np.random.default_rng([cfg.seed, _CAPACITY]).integers(cfg.k_min, cfg.k_max + 1, size=cfg.C)
    shape = ModelShape(cfg.dim, cfg.hidden, cfg.num_classes, cfg.E)
    model = GlobalModel.init(shape, [cfg.seed, _MODEL])
    clients = {c: ClientState.init(shape, c, cfg.seed * 1000 + _GATING) for c in range(cfg.C)}
    if cfg.backend == ORACLE and affinity is None:
        if cfg.affinity == "block":
            affinity = block_affinity(cfg.C, cfg.E, cfg.affinity_blocks, cfg.affinity_high, cfg.affinity_low, sizes)
        else:
            affinity = np.random.default_rng([cfg.seed, _AFFINITY]).uniform(0.0, 1.0, (cfg.C, cfg.E))
    trainer_cfg = TrainerConfig(cfg.R, cfg.lr, cfg.backend, affinity, cfg.oracle_noise)
    return ExperimentState(
        cfg=cfg,
        dataset=ds,
        train=train,
        test=test,
        sizes=sizes,
        capacities=capacities,
        model=model,
        clients=clients,
        fitness=FitnessMatrix.init(cfg.C, cfg.E, cfg.q0, beta=cfg.beta, kind=cfg.indicator, alpha_loss=cfg.alpha_loss),
        ledger=LoadLedger(cfg.E, cfg.gamma, cfg.alpha_adj, cfg.delta_ratio),
        history=UsageHistory(cfg.E, capacity=cfg.effective_window),
        trainer_cfg=trainer_cfg,
        trainer=trainer,
    )


def sample_participants(cfg: ExperimentConfig, t: int) -> list[int]:
    m = cfg.participants_per_round
    if m >= cfg.C:
        return list(range(cfg.C))
    rng = np.random.default_rng([cfg.seed, _PARTICIPATION, t])
    return sorted(rng.choice(cfg.C, size=m, replace=False).tolist())


def _oracle_accuracy(fb) -> float:
    total = sum(fb.usage.values())
    if total == 0:
        return float(np.mean(list(fb.accuracy.values())))
    return sum(fb.usage[e] * fb.accuracy[e] for e in fb.usage) / total


def _assign(state: ExperimentState, t: int, participants: list[int], tau: float):
    cfg = state.cfg
    caps = state.capacities[participants]
    Q = state.fitness.Q[participants]
    instance = build_instance(Q, participants, caps, state.sizes[participants], state.ledger, tau)
    if state.instance_hook is not None:
        state.instance_hook(t, instance)
    lo, hi = instance.lower, instance.upper
    random_plan = assign_random(cfg.C, cfg.E, caps, [cfg.seed, _RANDOM_PLAN, t], participants, t)
    if cfg.strategy == "random":
        return random_plan, 0, lo, hi, None
    if cfg.strategy == "greedy":
        return assign_greedy(Q, caps, participants, t), 0, lo, hi, None
    # the baselines' plans seed the search, so a node-limited solve never does worse than them
    result = solve_flex(
        instance,
        round_index=t,
        tie_noise_seed=[cfg.seed, _TIE_NOISE] if t == 1 else None,
        node_limit=cfg.node_limit,
        extra_candidates=[random_plan],
    )
    lo, hi = instance.bounds_at(result.relaxation_level)
    return result.plan, result.relaxation_level, lo, hi, result.objective


def run_round(state: ExperimentState, t: int) -> RoundRecord:
    """Execute round ``t`` (1-based) and append its record to ``state.records``."""
    cfg = state.cfg
    participants = sample_participants(cfg, t)
    size_of = {c: float(state.sizes[c]) for c in range(cfg.C)}

    # Step 1: fitness update from last round's feedback, load bounds, assignment
    if t > 1 and state.prev_plan is not None:
        state.fitness.update(state.prev_feedback, state.prev_plan.sets)
        state.ledger.update(state.prev_plan, size_of, state.prev_tau)
    tau = target_load(state.sizes[participants], state.capacities[participants], cfg.E)
    plan, level, lo, hi, objective = _assign(state, t, participants, tau)
    if objective is None:
        objective = float(sum(state.fitness.Q[c, e] for c in plan.sets for e in plan.sets[c]))

    # Step 2: local training on downloaded parameters only
    def train_one(c: int):
        download = state.model.download(plan[c])
        return state.trainer(download, state.clients[c], plan[c], state.train[c], state.trainer_cfg, [cfg.seed, _TRAIN, t, c])

    if cfg.threads > 1 and len(participants) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            results = list(pool.map(train_one, participants))
    else:
        results = [train_one(c) for c in participants]

    # Step 3: uploads; gating stays on the client
    uploads = []
    for c, (fb, new_state) in zip(participants, results):
        state.clients[c] = new_state
        uploads.append(fb)

    # Step 4: aggregation
    d_ext, d_experts = aggregation.aggregate(uploads, cfg.E, state.model.shape.p_expert)
    state.model = aggregation.apply(state.model, d_ext, d_experts)

    usage = np.zeros(cfg.E)
    for fb in uploads:
        for e, u in fb.usage.items():
            usage[e] += u
    state.history.append(usage)
    wl = state.history.window_load(t, cfg.effective_window)

    for c in participants:
        state.last_assigned[c] = plan[c]
    if cfg.backend == ORACLE:
        accs = [_oracle_accuracy(fb) for fb in uploads]
        for fb, a in zip(uploads, accs):
            state.last_accuracy[fb.client_id] = a
    else:
        accs = [evaluate(state.model, state.clients[c], plan[c], state.test[c]) for c in participants if len(state.test[c])]
    record = RoundRecord(
        round=t,
        participants=participants,
        plan=plan,
        tau=tau,
        assignment_loads=plan.loads(size_of, cfg.E),
        lower=np.asarray(lo, dtype=float),
        upper=np.asarray(hi, dtype=float),
        relaxation_level=level,
        objective=objective,
        feedback={fb.client_id: {e: (fb.usage[e], fb.accuracy[e], fb.loss[e]) for e in fb.usage} for fb in uploads},
        usage=usage,
        window_load=wl,
        mean_acc=mean_client_accuracy(accs) if accs else 0.0,
        cv=cv(wl),
        gap=maxmin_gap(wl),
        Q=state.fitness.Q.copy(),
    )
    state.prev_plan, state.prev_feedback, state.prev_tau = plan, uploads, tau
    state.records.append(record)
    return record


@dataclass
class Summary:
    mean_accuracy: float
    cv: float
    gap: float
    relaxed_rounds: int
    rounds: int
    full_window_load: list[float]


def final_accuracy(state: ExperimentState) -> float:
    cfg = state.cfg
    if cfg.backend == ORACLE:
        vals = [state.last_accuracy[c] for c in sorted(state.last_accuracy)]
    else:
        vals = []
        for c in range(cfg.C):
            if not len(state.test[c]):
                continue
            assigned = state.last_assigned.get(c)
            if assigned is None:
                assigned = assign_greedy(state.fitness.Q[[c]], [state.capacities[c]], [c])[c]
            vals.append(evaluate(state.model, state.clients[c], assigned, state.test[c]))
    return mean_client_accuracy(vals) if vals else 0.0


def run_experiment(cfg: ExperimentConfig, trainer: Callable = local_train, affinity=None, instance_hook=None):
    """Run ``cfg.T_max`` rounds; returns ``(records, summary, state)``."""
    state = init_state(cfg, trainer, affinity)
    state.instance_hook = instance_hook
    for t in range(1, cfg.T_max + 1):
        try:
            run_round(state, t)
        except FlexMoEError as exc:
            raise RoundFailed(t, exc) from exc
    full = np.zeros(cfg.E)
    for rec in state.records:
        full += rec.usage
    summary = Summary(
        mean_accuracy=final_accuracy(state),
        cv=cv(full),
        gap=maxmin_gap(full),
        relaxed_rounds=sum(1 for r in state.records if r.relaxation_level > 0),
        rounds=len(state.records),
        full_window_load=full.tolist(),
    )
    return state.records, summary, state
