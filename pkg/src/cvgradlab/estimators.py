"""Per-trajectory policy-gradient draws: REINFORCE and the actor-critic family.

Every estimator here has the form ``sum_t gamma**t * score(s_t, a_t) * w_t``
and differs only in the weight ``w_t``:

========= ===========================================================
REINFORCE discounted reward-to-go ``R_t``
QAC       ``q[t, s_t, a_t]``
AAC       ``adv[t, s_t, a_t]``
TDAC      ``r_{t+1} + gamma * v[t+1, s_{t+1}] - v[t, s_t]``
========= ===========================================================

The batch functions (``*_draws``) take a :class:`TrajectoryBatch` and return an
``(N, n_states * n_actions)`` array; the ``*_sample`` functions are the
single-trajectory forms.  Value tables are the time-indexed exact ones from
:func:`cvgradlab.exact.exact_values`.

The ``gamma**t`` factor is the discounted state weighting.  Without it the
expectation of the REINFORCE draw is not the gradient of the expected
discounted return (nor of any function of theta) once ``gamma < 1`` and
``T > 1``.  Being a deterministic per-step constant, it leaves every baseline
and control-variate argument untouched.
"""

from __future__ import annotations

import enum
from typing import Callable

import numpy as np

from .errors import DimensionMismatch
from .mdp import SoftmaxPolicy, Trajectory, TrajectoryBatch

# phi(t, s, a) -> weight; called with broadcastable integer arrays t (1, T), s (N, T), a (N, T)
Phi = Callable[[np.ndarray, np.ndarray, np.ndarray], "np.ndarray | float"]


class EstimatorId(str, enum.Enum):
    REINFORCE = "REINFORCE"
    QAC = "QAC"
    AAC = "AAC"
    TDAC = "TDAC"
    COMBINED = "COMBINED"

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, name: str) -> "EstimatorId":
        key = str(name).strip().upper().replace("-", "").replace("_", "")
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown estimator {name!r}; expected one of {[e.value for e in cls]}") from None


BASIC_ESTIMATORS = (EstimatorId.REINFORCE, EstimatorId.QAC, EstimatorId.AAC, EstimatorId.TDAC)


def _check(batch: TrajectoryBatch, policy: SoftmaxPolicy, tables=None) -> None:
    if len(batch) and (batch.states.max() >= policy.n_states or batch.actions.max() >= policy.n_actions):
        raise DimensionMismatch("trajectory indices exceed the policy's state/action space")
    if tables is not None:
        T = batch.horizon
        if tables.q.shape != (T, policy.n_states, policy.n_actions):
            raise DimensionMismatch(
                f"value tables have shape {tables.q.shape}, trajectories need "
                f"{(T, policy.n_states, policy.n_actions)}"
            )


def score_weighted_draws(batch: TrajectoryBatch, policy: SoftmaxPolicy, weights: np.ndarray) -> np.ndarray:
    """``sum_t gamma**t * score(s_t, a_t) * weights[:, t]`` for every trajectory in the batch."""
    _check(batch, policy)
    n, T = batch.states.shape
    S, A = policy.n_states, policy.n_actions
    w = np.broadcast_to(np.asarray(weights, dtype=float), (n, T)) * batch.discounts
    base = (np.arange(n)[:, None] * S + batch.states) * A  # flat offset of (row, s_t, 0)
    # indicator part: +w at (s_t, a_t)
    idx = [(base + batch.actions).ravel()]
    vals = [w.ravel()]
    # mean part: -w * pi(a'|s_t) at (s_t, a')
    pi = policy.probs[batch.states]  # (n, T, A)
    idx.append((base[..., None] + np.arange(A)).ravel())
    vals.append((-w[..., None] * pi).ravel())
    out = np.bincount(np.concatenate(idx), weights=np.concatenate(vals), minlength=n * S * A)
    return out.reshape(n, S * A)


def _at_steps(table: np.ndarray, batch: TrajectoryBatch) -> np.ndarray:
    t = np.arange(batch.horizon)[None, :]
    return table[t, batch.states, batch.actions]


def td_errors(batch: TrajectoryBatch, tables) -> np.ndarray:
    """One-step temporal differences along each trajectory, using ``v[T] = 0``."""
    T = batch.horizon
    t = np.arange(T)[None, :]
    v_now = tables.v[t, batch.states]
    v_next = np.zeros_like(v_now)
    v_next[:, :-1] = tables.v[t[:, 1:], batch.states[:, 1:]]
    return batch.rewards + tables.gamma * v_next - v_now


def reinforce_draws(batch: TrajectoryBatch, policy: SoftmaxPolicy) -> np.ndarray:
    return score_weighted_draws(batch, policy, batch.returns)


def qac_draws(batch: TrajectoryBatch, policy: SoftmaxPolicy, tables) -> np.ndarray:
    _check(batch, policy, tables)
    return score_weighted_draws(batch, policy, _at_steps(tables.q, batch))


def aac_draws(batch: TrajectoryBatch, policy: SoftmaxPolicy, tables) -> np.ndarray:
    _check(batch, policy, tables)
    return score_weighted_draws(batch, policy, _at_steps(tables.adv, batch))


def tdac_draws(batch: TrajectoryBatch, policy: SoftmaxPolicy, tables) -> np.ndarray:
    _check(batch, policy, tables)
    return score_weighted_draws(batch, policy, td_errors(batch, tables))


def phi_weights(phi: Phi, batch: TrajectoryBatch) -> np.ndarray:
    t = np.arange(batch.horizon)[None, :]
    w = np.asarray(phi(t, batch.states, batch.actions), dtype=float)
    return np.broadcast_to(w, batch.states.shape)


def phi_draws(batch: TrajectoryBatch, policy: SoftmaxPolicy, phi: Phi) -> np.ndarray:
    return score_weighted_draws(batch, policy, phi_weights(phi, batch))


def estimator_draws(estimator, batch: TrajectoryBatch, policy: SoftmaxPolicy, tables=None) -> np.ndarray:
    """Dispatch on an :class:`EstimatorId` (COMBINED lives in ``control_variates``)."""
    est = EstimatorId.parse(estimator) if not isinstance(estimator, EstimatorId) else estimator
    if est is EstimatorId.REINFORCE:
        return reinforce_draws(batch, policy)
    if tables is None:
        raise ValueError(f"{est} needs value tables")
    if est is EstimatorId.QAC:
        return qac_draws(batch, policy, tables)
    if est is EstimatorId.AAC:
        return aac_draws(batch, policy, tables)
    if est is EstimatorId.TDAC:
        return tdac_draws(batch, policy, tables)
    raise ValueError("COMBINED draws need a basis and lambda; use control_variates.combined_draws")


# single-trajectory forms


def _one(traj: Trajectory) -> TrajectoryBatch:
    return TrajectoryBatch.of([traj])


def reinforce_sample(traj: Trajectory, policy: SoftmaxPolicy) -> np.ndarray:
    return reinforce_draws(_one(traj), policy)[0]


def qac_sample(traj: Trajectory, policy: SoftmaxPolicy, tables) -> np.ndarray:
    return qac_draws(_one(traj), policy, tables)[0]


def aac_sample(traj: Trajectory, policy: SoftmaxPolicy, tables) -> np.ndarray:
    return aac_draws(_one(traj), policy, tables)[0]


def tdac_sample(traj: Trajectory, policy: SoftmaxPolicy, tables) -> np.ndarray:
    return tdac_draws(_one(traj), policy, tables)[0]


def score_weighted_sample(traj: Trajectory, policy: SoftmaxPolicy, phi: Phi) -> np.ndarray:
    return phi_draws(_one(traj), policy, phi)[0]
