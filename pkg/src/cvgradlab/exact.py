"""Exact oracles: finite-horizon dynamic programming and trajectory enumeration.

Enumeration walks every ``(s_0, a_0, ..., s_{T-1}, a_{T-1})`` sequence with
positive probability.  The terminal state ``s_T`` is never materialised since
neither rewards nor ``v[T] = 0`` depend on it.  Work is split into blocks by
trajectory prefix; per-block sums use numpy's pairwise reduction and blocks are
combined with :func:`math.fsum`, so results do not depend on block order.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import estimators as est
from .errors import BudgetExceeded
from .mdp import SoftmaxPolicy, TabularMDP, TrajectoryBatch

DEFAULT_BUDGET = 10**7
BUDGET_ENV = "CVGRADLAB_BUDGET"
BLOCK_SIZE = 1 << 16


def enumeration_budget() -> int:
    raw = os.environ.get(BUDGET_ENV)
    return int(raw) if raw else DEFAULT_BUDGET


def trajectory_space_size(mdp: TabularMDP) -> int:
    return (mdp.n_states * mdp.n_actions) ** mdp.horizon


def is_enumerable(mdp: TabularMDP, budget: int | None = None) -> bool:
    return trajectory_space_size(mdp) <= (enumeration_budget() if budget is None else budget)


@dataclass(frozen=True, eq=False)
class ValueTables:
    v: np.ndarray  # [t, s], t = 0..T, v[T] = 0
    q: np.ndarray  # [t, s, a], t = 0..T-1
    adv: np.ndarray  # [t, s, a]
    gamma: float

    def to_dict(self) -> dict:
        return {"v": self.v.tolist(), "q": self.q.tolist(), "adv": self.adv.tolist()}


@dataclass(frozen=True, eq=False)
class ExactGradient:
    grad: np.ndarray
    j: float


def exact_values(mdp: TabularMDP, policy: SoftmaxPolicy) -> ValueTables:
    """Backward Bellman recursion for the time-indexed V, Q and advantage under ``policy``."""
    policy.check_compatible(mdp)
    T, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    pi = policy.probs
    v = np.zeros((T + 1, S))
    q = np.zeros((T, S, A))
    for t in range(T - 1, -1, -1):
        q[t] = mdp.reward + mdp.gamma * mdp.transition @ v[t + 1]
        v[t] = (pi * q[t]).sum(axis=1)
    adv = q - v[:T, :, None]
    return ValueTables(v=v, q=q, adv=adv, gamma=mdp.gamma)


# ---------------------------------------------------------------------------
# enumeration


@dataclass
class _Partial:
    states: np.ndarray  # (M, t)
    actions: np.ndarray  # (M, t)
    prob: np.ndarray  # (M,)
    current: np.ndarray  # (M,) state s_t, action not yet chosen

    @property
    def depth(self) -> int:
        return self.states.shape[1]

    def __len__(self) -> int:
        return self.prob.shape[0]

    def row(self, i: int) -> "_Partial":
        sl = slice(i, i + 1)
        return _Partial(self.states[sl], self.actions[sl], self.prob[sl], self.current[sl])


def _expand(part: _Partial, mdp: TabularMDP, pi: np.ndarray) -> _Partial:
    """Extend every partial trajectory by one (action, next state) step."""
    S, A = mdp.n_states, mdp.n_actions
    M, t = len(part), part.depth
    last = t + 1 == mdp.horizon
    # actions
    p = (part.prob[:, None] * pi[part.current]).reshape(-1)
    states = np.repeat(np.concatenate([part.states, part.current[:, None]], axis=1), A, axis=0)
    actions = np.concatenate([np.repeat(part.actions, A, axis=0), np.tile(np.arange(A), M)[:, None]], axis=1)
    if last:
        keep = p > 0
        return _Partial(states[keep], actions[keep], p[keep], np.zeros(int(keep.sum()), dtype=np.int64))
    # next states
    nxt = mdp.transition[states[:, -1], actions[:, -1]]  # (M*A, S)
    p = (p[:, None] * nxt).reshape(-1)
    keep = p > 0
    states = np.repeat(states, S, axis=0)[keep]
    actions = np.repeat(actions, S, axis=0)[keep]
    current = np.tile(np.arange(S), M * A)[keep]
    return _Partial(states, actions, p[keep], current)


def enumerate_trajectories(
    mdp: TabularMDP,
    policy: SoftmaxPolicy,
    budget: int | None = None,
    block_size: int = BLOCK_SIZE,
) -> Iterator[tuple[TrajectoryBatch, np.ndarray]]:
    """Yield ``(batch, probabilities)`` blocks covering every positive-probability trajectory.

    Raises :class:`BudgetExceeded` when ``(n_states * n_actions) ** horizon``
    exceeds the budget (``CVGRADLAB_BUDGET`` or 10**7 by default).
    """
    policy.check_compatible(mdp)
    budget = enumeration_budget() if budget is None else budget
    size = trajectory_space_size(mdp)
    if size > budget:
        raise BudgetExceeded(
            f"{size} trajectories to enumerate exceeds budget {budget}; shrink the horizon or the MDP"
        )
    SA, T = mdp.n_states * mdp.n_actions, mdp.horizon
    pi = policy.probs
    s0 = np.flatnonzero(mdp.initial_dist > 0)
    root = _Partial(
        np.zeros((s0.size, 0), dtype=np.int64),
        np.zeros((s0.size, 0), dtype=np.int64),
        mdp.initial_dist[s0].astype(float),
        s0.astype(np.int64),
    )
    stack = [root]
    while stack:
        part = stack.pop()
        if len(part) * SA ** (T - part.depth) <= block_size:
            while part.depth < T:
                part = _expand(part, mdp, pi)
            if len(part):
                yield TrajectoryBatch.from_arrays(mdp, part.states, part.actions), part.prob
        elif len(part) > 1:
            stack.extend(part.row(i) for i in range(len(part) - 1, -1, -1))
        else:
            stack.append(_expand(part, mdp, pi))


def _fsum_blocks(blocks: list[np.ndarray]) -> np.ndarray:
    if not blocks:
        raise ValueError("enumeration produced no trajectories")
    stacked = np.stack(blocks)
    flat = stacked.reshape(len(blocks), -1)
    return np.array([math.fsum(flat[:, k]) for k in range(flat.shape[1])]).reshape(stacked.shape[1:])


def exact_moments(
    mdp: TabularMDP,
    policy: SoftmaxPolicy,
    draw_fn: Callable[[TrajectoryBatch], np.ndarray],
    budget: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Mean vector and covariance matrix of ``draw_fn`` under the trajectory distribution.

    Two passes: the covariance is accumulated around the exact mean, so a
    constant draw has covariance exactly zero.
    """
    means = [prob @ draw_fn(batch) for batch, prob in enumerate_trajectories(mdp, policy, budget)]
    mean = _fsum_blocks(means)
    covs = []
    for batch, prob in enumerate_trajectories(mdp, policy, budget):
        dev = draw_fn(batch) - mean
        covs.append((dev * prob[:, None]).T @ dev)
    return mean, _fsum_blocks(covs)


def exact_expectation(
    mdp: TabularMDP,
    policy: SoftmaxPolicy,
    fn: Callable[[TrajectoryBatch], np.ndarray],
    budget: int | None = None,
) -> np.ndarray:
    return _fsum_blocks([prob @ fn(batch) for batch, prob in enumerate_trajectories(mdp, policy, budget)])


def exact_policy_gradient(mdp: TabularMDP, policy: SoftmaxPolicy, budget: int | None = None) -> ExactGradient:
    """Exact gradient of the expected discounted return by exhaustive enumeration."""

    def both(batch: TrajectoryBatch) -> np.ndarray:
        return np.concatenate([est.reinforce_draws(batch, policy), batch.returns[:, :1]], axis=1)

    out = exact_expectation(mdp, policy, both, budget)
    return ExactGradient(grad=out[:-1], j=float(out[-1]))


def exact_objective(mdp: TabularMDP, policy: SoftmaxPolicy) -> float:
    """Expected discounted return J(theta) from the DP tables (no enumeration)."""
    return float(mdp.initial_dist @ exact_values(mdp, policy).v[0])


def exact_estimator_moments(
    mdp: TabularMDP,
    policy: SoftmaxPolicy,
    estimator,
    tables: ValueTables | None = None,
    budget: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact mean and covariance of one of the REINFORCE / QAC / AAC / TDAC draws."""
    if tables is None:
        tables = exact_values(mdp, policy)
    estimator = est.EstimatorId.parse(estimator) if not isinstance(estimator, est.EstimatorId) else estimator
    return exact_moments(mdp, policy, lambda b: est.estimator_draws(estimator, b, policy, tables), budget)
