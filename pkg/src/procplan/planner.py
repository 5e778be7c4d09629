"""Procedure planning and walk-through planning with a trained :class:`ModelBundle`."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .context import sample_context
from .genmodel import ExtModel, one_hot, policy_forward, rollout, rollout_batch, softmax_np

MAX_HORIZON = 12
EXACT_LIMIT = 12


class PlanningError(ValueError):
    pass


@dataclass
class PlanQuery:
    o1: np.ndarray
    oT: np.ndarray
    horizon: int
    mode: str = "mean"            # context: posterior mean or a sample
    num_samples: int = 1
    rollout_mode: str = "greedy"  # actions: argmax or sampled

    def __post_init__(self):
        if self.horizon < 2:
            raise PlanningError("horizon must be >= 2")
        if self.num_samples < 1:
            raise PlanningError("num_samples must be >= 1")
        if self.mode not in ("mean", "sample"):
            raise PlanningError(f"unknown context mode {self.mode!r}")


def trajectory_reward(bundle, states, actions):
    """Accumulated ``log D`` along a rollout."""
    _, r = bundle.discriminator.forward(states, one_hot(actions, bundle.num_actions))
    return float(r.sum())


def plan_procedure(query: PlanQuery, bundle, rng=None, max_horizon=MAX_HORIZON):
    """Plan ``query.horizon`` actions from a start and goal observation.

    The goal enters only through the context posterior. With several samples
    the rollout with the highest accumulated discriminator reward is kept.
    """
    if query.horizon > max_horizon:
        raise PlanningError(f"horizon {query.horizon} exceeds the configured maximum {max_horizon}")
    rng = np.random.default_rng(0) if rng is None else rng
    post = bundle.context.encode(query.o1, query.oT)
    best, best_score = None, -np.inf
    for stream in rng.spawn(query.num_samples):
        z = post.mean if query.mode == "mean" else sample_context(post, stream)
        steps = rollout(bundle.generator, z, query.horizon, stream, query.rollout_mode)
        actions = [a for _, a, _ in steps]
        if query.num_samples == 1:
            return actions
        score = trajectory_reward(bundle, np.stack([s for s, _, _ in steps]), np.array(actions))
        if score > best_score:
            best, best_score = actions, score
    return best


def plan_batch(bundle, o1, oT, horizon, rng, mode="mean", num_samples=1, rollout_mode="greedy"):
    """Vectorised planning for many queries at once; returns (Q, horizon) action ids."""
    o1, oT = np.atleast_2d(o1), np.atleast_2d(oT)
    post = bundle.context.encode(o1, oT)
    Q = len(o1)
    z = np.repeat(post.mean, num_samples, axis=0)
    if mode == "sample":
        z = z + np.exp(0.5 * np.repeat(post.log_var, num_samples, axis=0)) * rng.standard_normal(z.shape)
    states, actions, _ = rollout_batch(bundle.generator, z, horizon, rng, rollout_mode)
    if num_samples == 1:
        return actions
    _, r = bundle.discriminator.forward(states.reshape(-1, states.shape[-1]),
                                        one_hot(actions.reshape(-1), bundle.num_actions))
    score = r.reshape(Q, num_samples, horizon).sum(axis=-1)
    pick = score.argmax(axis=1)
    return actions.reshape(Q, num_samples, horizon)[np.arange(Q), pick]


# ------------------------------------------------------------ walk-through

@dataclass
class ScoreMatrix:
    S: np.ndarray
    pool: np.ndarray
    # nearest[i, m]: pool index reached from i under action m
    nearest: np.ndarray = field(default=None)


@dataclass
class WalkPlan:
    order: list
    scores: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.order)
        if sorted(self.order) != list(range(n)):
            raise PlanningError(f"walk order {self.order} is not a permutation")
        if n >= 1 and (self.order[0] != 0 or self.order[-1] != n - 1):
            raise PlanningError(f"walk order {self.order} does not keep the endpoints fixed")

    @property
    def total(self):
        return float(sum(self.scores))


def nearest_index(pool, x):
    """Index of the pool row closest to each row of ``x`` (lowest index on ties)."""
    d = ((x[:, None, :] - pool[None, :, :]) ** 2).sum(axis=-1)
    return d.argmin(axis=1)


def build_score_matrix(pool, bundle, z) -> ScoreMatrix:
    """Vote transition mass between pool observations.

    For every pool state and every action the transition model predicts a
    successor; the action's policy probability is added to the column of the
    nearest pool state. Each row therefore sums to one.
    """
    pool = np.asarray(pool, dtype=np.float64)
    N = len(pool)
    if N < 2:
        raise PlanningError("pool needs at least two observations")
    gen = bundle.generator
    M = bundle.num_actions
    pi = policy_forward(gen, pool)
    S = np.zeros((N, N))
    zz = np.atleast_2d(z)
    if isinstance(gen, ExtModel):
        src = np.repeat(pool, M, axis=0)
        acts = np.tile(np.arange(M), N)
        nxt = gen.next_state_for_action(src, acts, np.repeat(zz, N * M, axis=0))
        nearest = nearest_index(pool, nxt).reshape(N, M)
        for i in range(N):
            np.add.at(S[i], nearest[i], pi[i])
    else:
        nxt = gen.next_state_for_action(pool, None, np.repeat(zz, N, axis=0))
        k = nearest_index(pool, nxt)
        nearest = np.repeat(k[:, None], M, axis=1)
        S[np.arange(N), k] += pi.sum(axis=1)
    return ScoreMatrix(S, pool, nearest)


def path_score(S, order):
    return float(sum(S[a, b] for a, b in zip(order[:-1], order[1:])))


def solve_permutation(S, T=None, greedy=False) -> WalkPlan:
    """Order ``T`` candidates (first and last fixed) maximising the path score.

    Exact subset dynamic programming; among equally good orders the
    lexicographically smallest one is returned.
    """
    S = np.asarray(S.S if isinstance(S, ScoreMatrix) else S, dtype=np.float64)
    T = len(S) if T is None else T
    if S.shape != (T, T):
        raise PlanningError(f"score matrix shape {S.shape} does not match T={T}")
    if T < 2:
        raise PlanningError("need at least a start and a goal")
    if greedy:
        return _greedy_permutation(S)
    if T > EXACT_LIMIT:
        raise PlanningError(f"T={T} exceeds the exact solver limit {EXACT_LIMIT}; pass greedy=True")
    inner = list(range(1, T - 1))
    k = len(inner)
    full = (1 << k) - 1
    # best[mask][j]: best score from inner[j] (with `mask` visited) to the goal
    best = np.full((1 << k, max(k, 1)), -np.inf)
    for j in range(k):
        best[full, j] = S[inner[j], T - 1]
    for mask in range(full - 1, 0, -1):
        for j in range(k):
            if not mask >> j & 1:
                continue
            cur = inner[j]
            v = -np.inf
            for n in range(k):
                if mask >> n & 1:
                    continue
                v = max(v, S[cur, inner[n]] + best[mask | 1 << n, n])
            best[mask, j] = v
    order, mask, cur = [0], 0, 0
    if k == 0:
        order.append(T - 1)
    else:
        target = max(S[0, inner[n]] + best[1 << n, n] for n in range(k))
        while mask != full:
            for n in range(k):
                if mask >> n & 1:
                    continue
                if S[cur, inner[n]] + best[mask | 1 << n, n] == target:
                    target = best[mask | 1 << n, n]
                    mask |= 1 << n
                    cur = inner[n]
                    order.append(cur)
                    break
        order.append(T - 1)
    steps = [float(S[a, b]) for a, b in zip(order[:-1], order[1:])]
    return WalkPlan(order, steps)


def _greedy_permutation(S):
    T = len(S)
    left = set(range(1, T - 1))
    order = [0]
    while left:
        cur = order[-1]
        nxt = max(sorted(left), key=lambda j: S[cur, j])
        order.append(nxt)
        left.remove(nxt)
    order.append(T - 1)
    return WalkPlan(order, [float(S[a, b]) for a, b in zip(order[:-1], order[1:])])


def walkthrough(o1, oT, pool, bundle, greedy=False) -> WalkPlan:
    """Order ``pool`` into a path from start to goal.

    ``pool[0]`` is the start clip and ``pool[-1]`` the goal clip; the rest are
    the unordered intermediate candidates. ``o1``/``oT`` feed the context
    posterior. The returned order indexes ``pool``.
    """
    pool = np.asarray(pool, dtype=np.float64)
    if len(pool) < 2:
        raise PlanningError("pool needs at least two observations")
    z = bundle.context.encode(o1, oT).mean
    sm = build_score_matrix(pool, bundle, z)
    return solve_permutation(sm.S, len(pool), greedy=greedy)
