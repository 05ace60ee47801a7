"""Per-round expert assignment: load-balanced ILP (FLEX), Random and Greedy.

The FLEX problem for participating clients r with capacity k_r and data size w_r is::

    maximize   sum_{r,e} Q[r, e] X[r, e]
    subject to sum_e X[r, e] = k_r                         for every client
               L[e] <= sum_r w_r X[r, e] <= U[e]           for every expert
               X binary

Three in-repo search methods are used, picked by instance shape:

* ``enumerate``: branch-and-bound over per-client expert subsets (few plans overall);
* ``expert-dp``: exact dynamic program over experts (few clients, small capacities);
* ``lp-bnb``: LP-based branch-and-bound seeded with a rounding + local-repair incumbent.
  HiGHS is used only as the LP engine. Instances with C * E <= 64 are searched to the
  end; larger ones stop at a node limit and return the best feasible plan found.

Infeasible bounds are relaxed step by step.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import highspy

from .errors import InfeasibleAfterRelaxation, InvalidParameter

log = logging.getLogger(__name__)

EXACT_SIZE = 64  # C * E at or below this is always solved to proven optimality
ENUMERATION_LIMIT = 20_000  # leaf count below which the subset search is used
DP_MAX_CLIENTS = 16  # the expert DP enumerates all 2^n client subsets once
DP_STATE_LIMIT = 100_000  # and tracks at most prod(k_c + 1) usage states
DEFAULT_NODE_LIMIT = 200
MAX_DOUBLINGS = 4
LEVEL_DROP_LOWER = MAX_DOUBLINGS + 1
LEVEL_DROP_UPPER = MAX_DOUBLINGS + 2
TIE_NOISE = 1e-6
# the rounding + repair heuristic runs at the root and at every n-th node
HEURISTIC_EVERY = 10
_INT_TOL = 1e-6
_BOUND_EPS = 1e-9


@dataclass
class AssignmentPlan:
    """Expert subset per client id."""

    sets: dict[int, tuple[int, ...]]
    round: int = 0

    def __post_init__(self):
        self.sets = {int(c): tuple(sorted(int(e) for e in es)) for c, es in sorted(self.sets.items())}

    def __getitem__(self, c: int) -> tuple[int, ...]:
        return self.sets[c]

    def clients(self) -> list[int]:
        return list(self.sets)

    def loads(self, weights: Mapping[int, float], E: int) -> np.ndarray:
        """Per-expert sum of ``weights[c]`` over the clients holding it."""
        out = np.zeros(E)
        for c, es in self.sets.items():
            for e in es:
                out[e] += weights[c]
        return out

    def matrix(self, C: int, E: int) -> np.ndarray:
        X = np.zeros((C, E), dtype=np.int64)
        for c, es in self.sets.items():
            X[c, list(es)] = 1
        return X


@dataclass
class AssignmentInstance:
    """One round's FLEX problem; rows are the participating clients in ``client_ids`` order.

    ``target`` and ``deviation`` describe the load window the bounds were built from and
    drive the relaxation schedule; when omitted they are taken as the window midpoint and
    half-width.
    """

    Q: np.ndarray
    capacities: np.ndarray
    weights: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    client_ids: np.ndarray | None = None
    target: np.ndarray | None = None
    deviation: np.ndarray | None = None

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        n, E = self.Q.shape
        self.capacities = np.asarray(self.capacities, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=float)
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if self.client_ids is None:
            self.client_ids = np.arange(n)
        self.client_ids = np.asarray(self.client_ids, dtype=np.int64)
        if self.capacities.shape != (n,) or self.weights.shape != (n,) or self.client_ids.shape != (n,):
            raise InvalidParameter("capacities, weights and client ids need one entry per row of Q")
        if self.lower.shape != (E,) or self.upper.shape != (E,):
            raise InvalidParameter("bounds need one entry per expert")
        if np.any(self.capacities < 1) or np.any(self.capacities > E):
            raise InvalidParameter("every capacity must lie in [1, E]")
        if np.any(self.weights <= 0):
            raise InvalidParameter("client weights must be positive")
        # lower > upper is allowed: a very negative target load makes round-0 bounds
        # empty, which the solver reports as infeasible and the relaxation schedule handles
        if self.target is None:
            finite = np.isfinite(self.upper)
            self.target = np.where(finite, (self.lower + np.where(finite, self.upper, 0)) / 2, self.lower)
            self.deviation = np.where(finite, (np.where(finite, self.upper, 0) - self.lower) / 2, np.inf)
        self.target = np.asarray(self.target, dtype=float)
        self.deviation = np.asarray(self.deviation, dtype=float)

    @property
    def num_clients(self) -> int:
        return self.Q.shape[0]

    @property
    def num_experts(self) -> int:
        return self.Q.shape[1]

    def bounds_at(self, level: int) -> tuple[np.ndarray, np.ndarray]:
        """Load bounds after ``level`` steps of the relaxation schedule."""
        if level == 0:
            return self.lower, self.upper
        scale = 2.0 ** min(level, MAX_DOUBLINGS)
        with np.errstate(invalid="ignore"):
            lo = np.maximum(0.0, self.target - scale * self.deviation)
            hi = self.target + scale * self.deviation
        lo = np.where(np.isfinite(lo), lo, 0.0)
        if level >= LEVEL_DROP_LOWER:
            lo = np.zeros_like(lo)
        if level >= LEVEL_DROP_UPPER:
            hi = np.full_like(hi, np.inf)
        return lo, hi


@dataclass
class SolveResult:
    plan: AssignmentPlan
    objective: float
    relaxation_level: int = 0
    optimal: bool = True
    nodes: int = 0
    method: str = ""


# ---------------------------------------------------------------------------
# baselines


def assign_random(C: int, E: int, capacities: Sequence[int], seed, client_ids=None, round_index: int = 0) -> AssignmentPlan:
    """Each client draws ``k_c`` distinct experts uniformly at random."""
    ids = list(range(C)) if client_ids is None else [int(c) for c in client_ids]
    if len(capacities) != len(ids):
        raise InvalidParameter("one capacity per client is required")
    rng = np.random.default_rng(seed)
    sets = {}
    for c, k in zip(ids, capacities):
        if not 1 <= k <= E:
            raise InvalidParameter(f"capacity {k} not in [1, {E}]")
        sets[c] = tuple(rng.choice(E, size=int(k), replace=False).tolist())
    return AssignmentPlan(sets, round_index)


def _top_k(row: np.ndarray, k: int) -> tuple[int, ...]:
    return tuple(sorted(range(len(row)), key=lambda e: (-row[e], e))[:k])


def assign_greedy(Q: np.ndarray, capacities: Sequence[int], client_ids=None, round_index: int = 0) -> AssignmentPlan:
    """Top-``k_c`` experts of each client's row; ties go to the lower expert index."""
    Q = np.asarray(Q, dtype=float)
    ids = list(range(Q.shape[0])) if client_ids is None else [int(c) for c in client_ids]
    E = Q.shape[1]
    sets = {}
    for r, (c, k) in enumerate(zip(ids, capacities)):
        if not 1 <= k <= E:
            raise InvalidParameter(f"capacity {k} not in [1, {E}]")
        sets[c] = _top_k(Q[r], int(k))
    return AssignmentPlan(sets, round_index)


# ---------------------------------------------------------------------------
# load ledger


def target_load(sizes: Sequence[float], capacities: Sequence[int], E: int) -> float:
    """Ideal per-expert load: total weighted demand spread evenly over ``E`` experts."""
    if E < 1:
        raise InvalidParameter("E must be >= 1")
    return float(np.dot(np.asarray(sizes, dtype=float), np.asarray(capacities, dtype=float)) / E)


@dataclass
class LoadLedger:
    E: int
    gamma: float = 0.1
    alpha_adj: float = 1.0
    delta_ratio: float = 0.1
    deficit: np.ndarray = None
    last_loads: np.ndarray = None

    def __post_init__(self):
        if self.deficit is None:
            self.deficit = np.zeros(self.E)
        if self.last_loads is None:
            self.last_loads = np.zeros(self.E)

    def update(self, prev_plan: AssignmentPlan, sizes: Mapping[int, float], prev_tau: float) -> None:
        """Fold the previous round's realized loads into the smoothed deficit."""
        W = prev_plan.loads(sizes, self.E)
        self.last_loads = W
        self.deficit = (1.0 - self.gamma) * self.deficit + self.gamma * (W - prev_tau)

    def bounds(self, tau: float) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
        """``(lower, upper, target, deviation)`` for a round whose ideal load is ``tau``."""
        target = tau - self.alpha_adj * self.deficit
        dev = self.delta_ratio * tau
        return np.maximum(0.0, target - dev), target + dev, target, dev


def build_instance(Q, client_ids, capacities, sizes, ledger: LoadLedger, tau: float) -> AssignmentInstance:
    lo, hi, target, dev = ledger.bounds(tau)
    return AssignmentInstance(
        Q=np.asarray(Q, dtype=float),
        capacities=capacities,
        weights=sizes,
        lower=lo,
        upper=hi,
        client_ids=client_ids,
        target=target,
        deviation=np.full(ledger.E, dev),
    )


# ---------------------------------------------------------------------------
# solver


def plan_objective(Q: np.ndarray, rows: Sequence[Sequence[int]]) -> float:
    """Objective of a row-indexed plan, summed in a fixed (row, expert) order."""
    total = 0.0
    for r, es in enumerate(rows):
        for e in sorted(es):
            total += float(Q[r, e])
    return total


def _loads(rows, w, E) -> np.ndarray:
    out = np.zeros(E)
    for r, es in enumerate(rows):
        for e in es:
            out[e] += w[r]
    return out


def _tol(bound: np.ndarray) -> np.ndarray:
    return 1e-9 * np.maximum(1.0, np.abs(np.where(np.isfinite(bound), bound, 0.0)))


def is_feasible(rows, k, w, lo, hi) -> bool:
    E = len(lo)
    if any(len(set(es)) != kk or len(es) != kk for es, kk in zip(rows, k)):
        return False
    if any(e < 0 or e >= E for es in rows for e in es):
        return False
    loads = _loads(rows, w, E)
    return bool(np.all(loads >= lo - _tol(lo)) and np.all(loads <= hi + _tol(hi)))


def _subset_search(Q, k, w, lo, hi):
    """Exhaustive branch-and-bound over k-subsets per client.

    Clients are visited by descending weight, subsets by descending score; pruning uses
    the remaining-weight reachability of every lower bound and the sum of the remaining
    clients' unconstrained top-k scores.
    """
    n, E = Q.shape
    order = sorted(range(n), key=lambda r: (-w[r], r))
    subsets = []
    for r in order:
        opts = [(sum(Q[r, e] for e in s), s) for s in itertools.combinations(range(E), int(k[r]))]
        opts.sort(key=lambda t: -t[0])
        subsets.append(opts)
    best_scores = [opts[0][0] for opts in subsets]
    suffix_top = np.append(np.cumsum(best_scores[::-1])[::-1], 0.0)
    ws = [w[r] for r in order]
    suffix_w = np.append(np.cumsum(ws[::-1])[::-1], 0.0)
    wk = [w[r] * k[r] for r in order]
    suffix_wk = np.append(np.cumsum(wk[::-1])[::-1], 0.0)
    lo_tol, hi_tol = lo - _tol(lo), hi + _tol(hi)

    loads = np.zeros(E)
    choice: list[tuple[int, ...]] = [()] * n
    best = {"score": -math.inf, "rows": None, "nodes": 0}

    def reachable(depth: int) -> bool:
        gap = np.maximum(0.0, lo_tol - loads)
        return bool(np.all(gap <= suffix_w[depth]) and gap.sum() <= suffix_wk[depth] + 1e-9)

    def dfs(depth: int, score: float) -> None:
        best["nodes"] += 1
        if depth == n:
            if score > best["score"]:
                best["score"] = score
                rows = [()] * n
                for i, r in enumerate(order):
                    rows[r] = choice[i]
                best["rows"] = rows
            return
        wt = ws[depth]
        for s_score, s in subsets[depth]:
            if score + s_score + suffix_top[depth + 1] <= best["score"]:
                break
            if any(loads[e] + wt > hi_tol[e] for e in s):
                continue
            for e in s:
                loads[e] += wt
            if reachable(depth + 1):
                choice[depth] = s
                dfs(depth + 1, score + s_score)
            for e in s:
                loads[e] -= wt

    if reachable(0):
        dfs(0, 0.0)
    return best["rows"], best["nodes"]


def _expert_dp(Q, k, w, lo, hi):
    """Exact dynamic program over experts.

    Expert e picks a client subset whose weight lies in its window; the state is how many
    experts each client already holds, encoded in mixed radix ``k_c + 1``. Clients that
    are full cannot be picked again, and clients that could no longer reach ``k_c`` with
    the remaining experts must be picked now. Equal scores keep the earliest transition,
    so the result is deterministic. Returns ``(rows or None, transitions)``.
    """
    n, E = Q.shape
    k = np.asarray(k, dtype=np.int64)
    pow2 = np.int64(1) << np.arange(n, dtype=np.int64)
    radix = np.concatenate([[1], np.cumprod(k + 1)[:-1]]).astype(np.int64)
    masks = np.arange(1 << n, dtype=np.int64)
    bits = ((masks[:, None] >> np.arange(n)) & 1).astype(bool)
    load = bits @ w
    delta = bits @ radix
    lo_t, hi_t = lo - _tol(lo), hi + _tol(hi)

    codes = np.zeros(1, dtype=np.int64)
    scores = np.zeros(1)
    used = np.zeros((1, n), dtype=np.int64)
    back = []
    transitions = 0
    for e in range(E):
        ok = np.flatnonzero((load >= lo_t[e]) & (load <= hi_t[e]))
        cand, cand_bits = masks[ok], bits[ok]
        cand_score = cand_bits @ Q[:, e]
        left = E - e - 1
        full = ((used >= k) * pow2).sum(axis=1)
        must = ((k - used > left) * pow2).sum(axis=1)
        i_parts, j_parts = [], []
        chunk = max(1, 4_000_000 // max(1, len(cand)))
        for a in range(0, len(codes), chunk):
            f, m = full[a : a + chunk, None], must[a : a + chunk, None]
            compat = ((cand[None, :] & f) == 0) & ((m & ~cand[None, :]) == 0)
            ii, jj = np.nonzero(compat)
            i_parts.append(ii + a)
            j_parts.append(jj)
        i_idx = np.concatenate(i_parts)
        j_idx = np.concatenate(j_parts)
        transitions += len(i_idx)
        if len(i_idx) == 0:
            return None, transitions
        new_codes = codes[i_idx] + delta[ok][j_idx]
        new_scores = scores[i_idx] + cand_score[j_idx]
        order = np.lexsort((np.arange(len(new_codes)), -new_scores, new_codes))
        first = np.ones(len(order), dtype=bool)
        first[1:] = new_codes[order[1:]] != new_codes[order[:-1]]
        sel = order[first]
        back.append((i_idx[sel], cand[j_idx[sel]]))
        codes, scores = new_codes[sel], new_scores[sel]
        used = used[i_idx[sel]] + cand_bits[j_idx[sel]]
    # the must-pick rule leaves only the final state (every client at k_c) after the last expert
    rows = [[] for _ in range(n)]
    idx = 0
    for e in range(E - 1, -1, -1):
        prev, mask = back[e]
        for r in np.flatnonzero((int(mask[idx]) >> np.arange(n)) & 1):
            rows[r].append(e)
        idx = int(prev[idx])
    return [tuple(sorted(r)) for r in rows], transitions


def _dp_states(k) -> float:
    total = 1.0
    for kk in k:
        total *= int(kk) + 1
    return total


class _LPModel:
    """LP relaxation of one bounded FLEX problem with per-variable fixings.

    One HiGHS model is kept for the whole search; each node only changes column bounds,
    so the simplex warm-starts from the previous basis.
    """

    def __init__(self, Q, k, w, lo, hi):
        n, E = Q.shape
        self.n, self.E = n, E
        inf = highspy.kHighsInf
        lp = highspy.HighsLp()
        lp.num_col_ = n * E
        lp.num_row_ = n + E
        lp.sense_ = highspy.ObjSense.kMaximize
        lp.col_cost_ = np.asarray(Q, dtype=float).ravel()
        lp.col_lower_ = np.zeros(n * E)
        lp.col_upper_ = np.ones(n * E)
        k = np.asarray(k, dtype=float)
        lp.row_lower_ = np.concatenate([k, lo])
        lp.row_upper_ = np.concatenate([k, np.where(np.isfinite(hi), hi, inf)])
        # column (r, e) sits in client row r and expert row n + e
        idx = np.empty(2 * n * E, dtype=np.int32)
        val = np.empty(2 * n * E)
        idx[0::2] = np.repeat(np.arange(n), E)
        idx[1::2] = n + np.tile(np.arange(E), n)
        val[0::2] = 1.0
        val[1::2] = np.repeat(np.asarray(w, dtype=float), E)
        lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
        lp.a_matrix_.start_ = np.arange(0, 2 * n * E + 1, 2, dtype=np.int32)
        lp.a_matrix_.index_ = idx
        lp.a_matrix_.value_ = val
        h = highspy.Highs()
        h.setOptionValue("output_flag", False)
        h.setOptionValue("solver", "simplex")
        h.setOptionValue("presolve", "off")
        h.setOptionValue("threads", 1)
        h.setOptionValue("primal_feasibility_tolerance", 1e-10)
        h.setOptionValue("dual_feasibility_tolerance", 1e-10)
        h.passModel(lp)
        self.h = h
        self.cols = np.arange(n * E, dtype=np.int32)

    def solve(self, fix_lo: np.ndarray, fix_hi: np.ndarray):
        h = self.h
        h.changeColsBounds(len(self.cols), self.cols, fix_lo, fix_hi)
        h.run()
        if h.getModelStatus() != highspy.HighsModelStatus.kOptimal:
            return None, None
        x = np.asarray(h.getSolution().col_value).reshape(self.n, self.E)
        return h.getInfo().objective_function_value, x


def _round_rows(x: np.ndarray, Q: np.ndarray, k) -> list[tuple[int, ...]]:
    n, E = x.shape
    return [tuple(sorted(sorted(range(E), key=lambda e: (-x[r, e], -Q[r, e], e))[: int(k[r])])) for r in range(n)]


def _violation(loads, lo, hi) -> float:
    over = np.where(np.isfinite(hi), np.maximum(0.0, loads - hi - _tol(hi)), 0.0)
    under = np.maximum(0.0, lo - _tol(lo) - loads)
    return float(over.sum() + under.sum())


def _repair(rows, Q, k, w, lo, hi, max_iter: int = 10_000):
    """Single-swap descent on total bound violation, then objective-improving swaps.

    Returns a feasible row list or ``None`` when the violation cannot be driven to zero.
    """
    n, E = Q.shape
    rows = [set(es) for es in rows]
    loads = _loads(rows, w, E)
    viol = _violation(loads, lo, hi)
    it = 0
    while viol > 0 and it < max_iter:
        it += 1
        best = None
        for r in range(n):
            for out in sorted(rows[r]):
                for inn in range(E):
                    if inn in rows[r]:
                        continue
                    loads[out] -= w[r]
                    loads[inn] += w[r]
                    v = _violation(loads, lo, hi)
                    loads[out] += w[r]
                    loads[inn] -= w[r]
                    key = (v, -(Q[r, inn] - Q[r, out]), r, out, inn)
                    if best is None or key < best:
                        best = key
        if best is None or best[0] >= viol:
            return None
        v, _, r, out, inn = best
        rows[r].remove(out)
        rows[r].add(inn)
        loads[out] -= w[r]
        loads[inn] += w[r]
        viol = v
    if viol > 0:
        return None
    _improve(rows, loads, Q, w, lo, hi, max_iter)
    return [tuple(sorted(es)) for es in rows]


def _improve(rows, loads, Q, w, lo, hi, max_iter) -> None:
    """First-improvement local search over single swaps and pairwise exchanges."""
    n, E = Q.shape
    lo_t, hi_t = lo - _tol(lo), hi + _tol(hi)

    def ok(e):
        return lo_t[e] <= loads[e] <= hi_t[e]

    for _ in range(max_iter):
        improved = False
        for r in range(n):
            for out in sorted(rows[r]):
                for inn in range(E):
                    if inn in rows[r] or Q[r, inn] - Q[r, out] <= 1e-12:
                        continue
                    loads[out] -= w[r]
                    loads[inn] += w[r]
                    if ok(out) and ok(inn):
                        rows[r].remove(out)
                        rows[r].add(inn)
                        improved = True
                        break
                    loads[out] += w[r]
                    loads[inn] -= w[r]
                if improved:
                    break
            if improved:
                break
        if not improved:
            for r1, r2 in itertools.combinations(range(n), 2):
                for e1 in sorted(rows[r1] - rows[r2]):
                    for e2 in sorted(rows[r2] - rows[r1]):
                        gain = Q[r1, e2] - Q[r1, e1] + Q[r2, e1] - Q[r2, e2]
                        if gain <= 1e-12:
                            continue
                        delta = w[r1] - w[r2]
                        loads[e1] -= delta
                        loads[e2] += delta
                        if ok(e1) and ok(e2):
                            rows[r1].remove(e1)
                            rows[r1].add(e2)
                            rows[r2].remove(e2)
                            rows[r2].add(e1)
                            improved = True
                            break
                        loads[e1] += delta
                        loads[e2] -= delta
                    if improved:
                        break
                if improved:
                    break
        if not improved:
            return


def _lp_branch_and_bound(Q, k, w, lo, hi, node_limit, candidates=()):
    """Depth-first LP-based branch-and-bound on single variables.

    Returns ``(rows, nodes, complete)``; ``complete`` is False when the node limit stopped
    the search, in which case ``rows`` is the best plan found (or None).
    """
    n, E = Q.shape
    lp = _LPModel(Q, k, w, lo, hi)
    best_rows, best_score = None, -math.inf
    for rows in candidates:
        if rows is not None and is_feasible(rows, k, w, lo, hi):
            s = plan_objective(Q, rows)
            if s > best_score:
                best_rows, best_score = list(rows), s

    root_lo, root_hi = np.zeros(n * E), np.ones(n * E)
    stack = [(root_lo, root_hi)]
    nodes = 0
    while stack:
        if node_limit is not None and nodes >= node_limit:
            return best_rows, nodes, False
        fix_lo, fix_hi = stack.pop()
        nodes += 1
        bound, x = lp.solve(fix_lo, fix_hi)
        if x is None or bound <= best_score + _BOUND_EPS:
            continue
        frac = np.abs(x - np.round(x))
        if frac.max() <= _INT_TOL:
            rows = [tuple(np.flatnonzero(np.round(x[r]) == 1).tolist()) for r in range(n)]
            if is_feasible(rows, k, w, lo, hi):
                s = plan_objective(Q, rows)
                if s > best_score:
                    best_rows, best_score = rows, s
                continue
        if nodes == 1 or nodes % HEURISTIC_EVERY == 0:
            rows = _repair(_round_rows(x, Q, k), Q, k, w, lo, hi)
            if rows is not None:
                s = plan_objective(Q, rows)
                if s > best_score:
                    best_rows, best_score = rows, s
        j = int(np.argmin(np.abs(x.ravel() - 0.5) + 1e-12 * np.arange(n * E)))
        zero_lo, zero_hi = fix_lo.copy(), fix_hi.copy()
        zero_hi[j] = 0.0
        one_lo, one_hi = fix_lo.copy(), fix_hi.copy()
        one_lo[j] = 1.0
        stack.append((zero_lo, zero_hi))
        stack.append((one_lo, one_hi))
    return best_rows, nodes, True


def snap_bounds(w: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Round bounds inward to multiples of gcd(w) when all weights are integers.

    Every achievable load is such a multiple, so the feasible set is unchanged; with equal
    weights the tightened problem is a b-matching whose LP relaxation is integral.
    """
    if not np.all(w == np.round(w)):
        return lo, hi
    g = float(np.gcd.reduce(np.round(w).astype(np.int64)))
    lo = g * np.ceil(lo / g - 1e-9)
    with np.errstate(invalid="ignore"):
        hi = np.where(np.isfinite(hi), g * np.floor(hi / g + 1e-9), hi)
    return np.maximum(lo, 0.0), hi


def _leaf_count(E: int, k) -> float:
    total = 1.0
    for kk in k:
        total *= math.comb(E, int(kk))
    return total


def solve_bounded(Q, k, w, lo, hi, *, node_limit=DEFAULT_NODE_LIMIT, method: str = "auto", candidates=()):
    """Solve one fixed-bounds problem.

    Returns ``(rows or None, nodes, proven, method)``; ``rows is None`` with ``proven`` True
    means the bounds are infeasible.
    """
    Q = np.asarray(Q, dtype=float)
    n, E = Q.shape
    k = np.asarray(k, dtype=np.int64)
    w = np.asarray(w, dtype=float)
    lo, hi = snap_bounds(w, lo, hi)
    if np.any(lo > hi):
        return None, 0, True, method
    if method == "auto":
        if _leaf_count(E, k) <= ENUMERATION_LIMIT:
            method = "enumerate"
        elif n <= DP_MAX_CLIENTS and _dp_states(k) <= DP_STATE_LIMIT:
            method = "expert-dp"
        else:
            method = "lp-bnb"
    if method == "enumerate":
        rows, nodes = _subset_search(Q, k, w, lo, hi)
        return rows, nodes, True, method
    if method == "expert-dp":
        if n > DP_MAX_CLIENTS:
            raise InvalidParameter(f"expert-dp handles at most {DP_MAX_CLIENTS} clients, got {n}")
        rows, nodes = _expert_dp(Q, k, w, lo, hi)
        return rows, nodes, True, method
    if method != "lp-bnb":
        raise InvalidParameter(f"unknown solver method {method!r}")
    limit = None if n * E <= EXACT_SIZE else node_limit
    rows, nodes, complete = _lp_branch_and_bound(Q, k, w, lo, hi, limit, candidates)
    return rows, nodes, complete, method


def solve_flex(
    instance: AssignmentInstance,
    *,
    round_index: int = 0,
    tie_noise_seed=None,
    node_limit: int = DEFAULT_NODE_LIMIT,
    method: str = "auto",
    extra_candidates: Iterable[AssignmentPlan] = (),
) -> SolveResult:
    """Solve the FLEX assignment problem, relaxing the load bounds if they are infeasible.

    ``tie_noise_seed`` adds seeded uniform noise in ``[0, 1e-6)`` to the scores the solver
    sees (used for the first round, where all scores are equal). The reported objective is
    always measured on the unperturbed scores. ``extra_candidates`` are plans (e.g. the
    baselines') used as starting incumbents by the LP search.
    """
    Q = instance.Q
    if tie_noise_seed is not None:
        Q = Q + np.random.default_rng(tie_noise_seed).uniform(0.0, TIE_NOISE, Q.shape)
    ids = [int(c) for c in instance.client_ids]
    row_of = {c: r for r, c in enumerate(ids)}
    cand_rows = []
    for plan in extra_candidates:
        if set(plan.sets) == set(ids):
            cand_rows.append([plan.sets[c] for c in ids])
    cand_rows.append([_top_k(Q[r], int(instance.capacities[r])) for r in range(instance.num_clients)])

    total_nodes = 0
    for level in range(LEVEL_DROP_UPPER + 1):
        lo, hi = instance.bounds_at(level)
        if level == LEVEL_DROP_UPPER:
            rows, proven, used = cand_rows[-1], True, "greedy"
        else:
            rows, nodes, proven, used = solve_bounded(
                Q, instance.capacities, instance.weights, lo, hi,
                node_limit=node_limit, method=method, candidates=cand_rows,
            )
            total_nodes += nodes
        if rows is not None:
            if level:
                log.info("round %d: assignment bounds relaxed to level %d", round_index, level)
            plan = AssignmentPlan({ids[r]: rows[r] for r in range(len(ids))}, round_index)
            objective = plan_objective(instance.Q, [plan.sets[c] for c in ids])
            return SolveResult(plan, objective, level, proven, total_nodes, used)
        log.info("round %d: no feasible assignment at relaxation level %d", round_index, level)
    raise InfeasibleAfterRelaxation(f"round {round_index}: no feasible assignment")  # pragma: no cover


# ---------------------------------------------------------------------------
# text format


def dump_instance(instance: AssignmentInstance, path: str | Path) -> None:
    """Write ``C E``, then ``k_c |D_c|`` per client, the Q rows, and ``L Gamma`` per expert."""
    n, E = instance.Q.shape
    lines = [f"{n} {E}"]
    lines += [f"{int(k)} {_num(w)}" for k, w in zip(instance.capacities, instance.weights)]
    lines += [" ".join(repr(float(q)) for q in row) for row in instance.Q]
    lines += [f"{_num(lo)} {_num(hi)}" for lo, hi in zip(instance.lower, instance.upper)]
    Path(path).write_text("\n".join(lines) + "\n")


def _num(v) -> str:
    v = float(v)
    if math.isinf(v):
        return "inf"
    return str(int(v)) if v.is_integer() else repr(v)


def load_instance(path: str | Path) -> AssignmentInstance:
    tokens = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    n, E = int(tokens[0][0]), int(tokens[0][1])
    caps = [int(t[0]) for t in tokens[1 : 1 + n]]
    weights = [float(t[1]) for t in tokens[1 : 1 + n]]
    Q = [[float(v) for v in t] for t in tokens[1 + n : 1 + 2 * n]]
    bounds = [(float(t[0]), float(t[1])) for t in tokens[1 + 2 * n : 1 + 2 * n + E]]
    if len(bounds) != E or any(len(row) != E for row in Q):
        raise InvalidParameter(f"{path}: malformed instance file")
    return AssignmentInstance(
        Q=np.array(Q).reshape(n, E),
        capacities=caps,
        weights=weights,
        lower=[b[0] for b in bounds],
        upper=[b[1] for b in bounds],
    )
