"""Finite-horizon tabular MDPs, softmax policies and seeded trajectory sampling.

Rewards are a deterministic function of ``(s, a)`` and every episode runs for
exactly ``horizon`` steps.  Trajectory ``i`` of stream ``(seed, stream)`` is a
pure function of those three integers: uniforms are read from a Philox
counter-based generator at a fixed offset ``i * stride``, so batching and
partitioning never change what a given trajectory looks like.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import (
    BadGamma,
    BadShape,
    DimensionMismatch,
    EmptySequence,
    IndexOutOfRange,
    ParseError,
    RowNotStochastic,
)

SIMPLEX_TOL = 1e-12
MDP_FIELDS = ("n_states", "n_actions", "gamma", "horizon", "initial_dist", "transition", "reward")
BUNDLED_MDPS = ("bandit2.mdp", "chain5.mdp")

_U64 = (1 << 64) - 1


def _frozen(x: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x)
    x.setflags(write=False)
    return x


@dataclass(frozen=True, eq=False)
class TabularMDP:
    n_states: int
    n_actions: int
    transition: np.ndarray  # [s, a, s']
    reward: np.ndarray  # [s, a]
    gamma: float
    horizon: int
    initial_dist: np.ndarray

    @property
    def dim(self) -> int:
        """Dimension of the policy parameter / gradient vector."""
        return self.n_states * self.n_actions

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "gamma": self.gamma,
            "horizon": self.horizon,
            "initial_dist": self.initial_dist.tolist(),
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
        }

    def with_horizon(self, horizon: int) -> "TabularMDP":
        return validate_mdp({**self.to_dict(), "horizon": horizon})


def _as_int(raw: Mapping[str, Any], key: str) -> int:
    value = raw[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
        raise ParseError(f"field {key!r} must be an integer, got {value!r}")
    return int(value)


def _as_array(raw: Mapping[str, Any], key: str, shape: tuple) -> np.ndarray:
    try:
        arr = np.asarray(raw[key], dtype=float)
    except (TypeError, ValueError) as exc:
        raise BadShape(f"field {key!r} is not a rectangular numeric array") from exc
    if arr.shape != shape:
        raise BadShape(f"field {key!r} has shape {arr.shape}, expected {shape}")
    if not np.all(np.isfinite(arr)):
        raise ParseError(f"field {key!r} contains non-finite values")
    return arr


def validate_mdp(raw: Mapping[str, Any]) -> TabularMDP:
    """Check a raw MDP description and build a :class:`TabularMDP`.

    Raises :class:`BadShape`, :class:`RowNotStochastic` or :class:`BadGamma`
    for the corresponding violations, :class:`ParseError` for missing,
    unknown or non-numeric fields.
    """
    unknown = sorted(set(raw) - set(MDP_FIELDS))
    if unknown:
        raise ParseError(f"unknown MDP field(s): {', '.join(unknown)}")
    missing = [k for k in MDP_FIELDS if k not in raw]
    if missing:
        raise ParseError(f"missing MDP field(s): {', '.join(missing)}")

    n_states = _as_int(raw, "n_states")
    n_actions = _as_int(raw, "n_actions")
    horizon = _as_int(raw, "horizon")
    if n_states < 1 or n_actions < 1:
        raise BadShape("n_states and n_actions must be positive")
    if horizon < 1:
        raise BadShape("horizon must be >= 1")
    gamma = raw["gamma"]
    if isinstance(gamma, bool) or not isinstance(gamma, (int, float)):
        raise ParseError(f"field 'gamma' must be a number, got {gamma!r}")
    gamma = float(gamma)
    if not (0.0 <= gamma < 1.0):
        raise BadGamma(f"gamma must lie in [0, 1), got {gamma}")

    transition = _as_array(raw, "transition", (n_states, n_actions, n_states))
    reward = _as_array(raw, "reward", (n_states, n_actions))
    initial = _as_array(raw, "initial_dist", (n_states,))

    if np.any(transition < 0):
        s, a, _ = np.argwhere(transition < 0)[0]
        raise RowNotStochastic(f"transition[{s}][{a}] has a negative entry")
    row_err = np.abs(transition.sum(axis=2) - 1.0)
    if np.any(row_err > SIMPLEX_TOL):
        s, a = np.argwhere(row_err > SIMPLEX_TOL)[0]
        raise RowNotStochastic(f"transition[{s}][{a}] sums to {transition[s, a].sum()!r}")
    if np.any(initial < 0) or abs(initial.sum() - 1.0) > SIMPLEX_TOL:
        raise RowNotStochastic(f"initial_dist is not a probability vector (sum {initial.sum()!r})")

    return TabularMDP(
        n_states=n_states,
        n_actions=n_actions,
        transition=_frozen(transition),
        reward=_frozen(reward),
        gamma=gamma,
        horizon=horizon,
        initial_dist=_frozen(initial),
    )


def parse_mdp(text: str) -> TabularMDP:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"MDP file is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ParseError("MDP file must hold a single object")
    return validate_mdp(raw)


def resolve_mdp_path(path: str | Path, base_dir: str | Path | None = None) -> Path:
    """Locate an MDP file: as given, relative to ``base_dir``, or bundled."""
    p = Path(path)
    candidates = [p]
    if base_dir is not None and not p.is_absolute():
        candidates.append(Path(base_dir) / p)
    for c in candidates:
        if c.is_file():
            return c
    if len(p.parts) == 1:
        for name in (p.name, p.name + ".mdp"):
            if name in BUNDLED_MDPS:
                return Path(str(resources.files("cvgradlab") / "data" / name))
    raise FileNotFoundError(f"MDP file not found: {path}")


def load_mdp(path: str | Path, base_dir: str | Path | None = None) -> TabularMDP:
    return parse_mdp(resolve_mdp_path(path, base_dir).read_text(encoding="utf-8"))


def bundled_mdp(name: str) -> TabularMDP:
    """Load one of the bundled instances (``bandit2`` or ``chain5``)."""
    if not name.endswith(".mdp"):
        name += ".mdp"
    return load_mdp(name)


# ---------------------------------------------------------------------------
# policy


@dataclass(frozen=True, eq=False)
class SoftmaxPolicy:
    """Tabular softmax policy, one parameter per flattened ``(s, a)``."""

    theta: np.ndarray
    n_states: int
    n_actions: int

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float).reshape(-1)
        if theta.shape != (self.n_states * self.n_actions,):
            raise DimensionMismatch(
                f"theta has {theta.size} entries, expected {self.n_states * self.n_actions}"
            )
        object.__setattr__(self, "theta", _frozen(theta.copy()))
        table = theta.reshape(self.n_states, self.n_actions)
        z = np.exp(table - table.max(axis=1, keepdims=True))
        object.__setattr__(self, "_probs", _frozen(z / z.sum(axis=1, keepdims=True)))

    @classmethod
    def zeros(cls, mdp: TabularMDP) -> "SoftmaxPolicy":
        return cls(np.zeros(mdp.dim), mdp.n_states, mdp.n_actions)

    @classmethod
    def for_mdp(cls, mdp: TabularMDP, theta) -> "SoftmaxPolicy":
        return cls(np.asarray(theta, dtype=float), mdp.n_states, mdp.n_actions)

    @property
    def probs(self) -> np.ndarray:
        """Full ``[s, a]`` table of action probabilities."""
        return self._probs

    def check_compatible(self, mdp: TabularMDP) -> None:
        if (self.n_states, self.n_actions) != (mdp.n_states, mdp.n_actions):
            raise DimensionMismatch(
                f"policy is {self.n_states}x{self.n_actions}, MDP is {mdp.n_states}x{mdp.n_actions}"
            )


def _check_state(policy: SoftmaxPolicy, s: int) -> None:
    if not 0 <= s < policy.n_states:
        raise IndexOutOfRange(f"state {s} outside [0, {policy.n_states})")


def policy_probs(policy: SoftmaxPolicy, s: int) -> np.ndarray:
    _check_state(policy, s)
    return policy.probs[s].copy()


def score(policy: SoftmaxPolicy, s: int, a: int) -> np.ndarray:
    """Gradient of ``log pi(a|s)`` with respect to the flattened theta."""
    _check_state(policy, s)
    if not 0 <= a < policy.n_actions:
        raise IndexOutOfRange(f"action {a} outside [0, {policy.n_actions})")
    out = np.zeros((policy.n_states, policy.n_actions))
    out[s] = -policy.probs[s]
    out[s, a] += 1.0
    return out.reshape(-1)


# ---------------------------------------------------------------------------
# trajectories


def compute_returns(rewards: Sequence[float], gamma: float) -> np.ndarray:
    """Discounted reward-to-go, ``returns[t] = sum_k gamma**(k-t) * rewards[k]`` for k >= t.

    ``rewards[t]`` is the reward received after acting at step ``t``.
    """
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size == 0:
        raise EmptySequence("rewards must be a non-empty 1-D sequence")
    return _returns(r[None, :], gamma)[0]


def _returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.empty_like(rewards, dtype=float)
    acc = np.zeros(rewards.shape[0])
    for t in range(rewards.shape[1] - 1, -1, -1):
        acc = rewards[:, t] + gamma * acc
        out[:, t] = acc
    return out


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    returns: np.ndarray
    gamma: float

    def __len__(self) -> int:
        return len(self.states)

    @property
    def steps(self) -> list[tuple[int, int, float]]:
        return [(int(s), int(a), float(r)) for s, a, r in zip(self.states, self.actions, self.rewards)]


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    """``N`` equal-length trajectories stored as ``(N, T)`` arrays."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    returns: np.ndarray
    gamma: float

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def horizon(self) -> int:
        return self.states.shape[1]

    def __getitem__(self, i: int) -> Trajectory:
        return Trajectory(self.states[i], self.actions[i], self.rewards[i], self.returns[i], self.gamma)

    @property
    def discounts(self) -> np.ndarray:
        """``gamma**t`` for ``t = 0..T-1``: the weight of step ``t`` in the gradient."""
        return self.gamma ** np.arange(self.horizon, dtype=float)

    @classmethod
    def from_arrays(cls, mdp: TabularMDP, states: np.ndarray, actions: np.ndarray) -> "TrajectoryBatch":
        rewards = mdp.reward[states, actions]
        return cls(states, actions, rewards, _returns(rewards, mdp.gamma), float(mdp.gamma))

    @classmethod
    def of(cls, trajectories: Sequence[Trajectory]) -> "TrajectoryBatch":
        gammas = {tr.gamma for tr in trajectories}
        if len(gammas) != 1:
            raise ValueError("trajectories must share one discount factor")
        arrays = (np.stack([getattr(tr, f) for tr in trajectories]) for f in ("states", "actions", "rewards", "returns"))
        return cls(*arrays, gammas.pop())


def _inverse_cdf_tables(p: np.ndarray) -> np.ndarray:
    """Cumulative tables along the last axis, pinned to exactly 1 from the last positive entry on.

    With ``u < 1`` the draw ``#(cdf <= u)`` then never lands on a zero-probability index.
    """
    cdf = np.cumsum(p, axis=-1)
    positive = p > 0
    last = p.shape[-1] - 1 - np.argmax(positive[..., ::-1], axis=-1)
    idx = np.arange(p.shape[-1])
    cdf[idx >= last[..., None]] = 1.0
    return cdf


def _draw(cdf: np.ndarray, u: np.ndarray) -> np.ndarray:
    return (cdf <= u[:, None]).sum(axis=1)


def _stride(horizon: int) -> int:
    # uniforms per trajectory: 1 initial state + T actions + (T-1) transitions, padded to a Philox block
    k = 2 * horizon
    return k + (-k) % 4


def trajectory_uniforms(seed: int, n: int, horizon: int, start: int = 0, stream: int = 0) -> np.ndarray:
    """Uniform draws for trajectories ``start .. start+n-1`` of stream ``(seed, stream)``."""
    k = _stride(horizon)
    bitgen = np.random.Philox(key=[int(seed) & _U64, int(stream) & _U64])
    if start:
        bitgen.advance(start * k // 4)
    return np.random.Generator(bitgen).random((n, k))


def sample_batch(
    mdp: TabularMDP,
    policy: SoftmaxPolicy,
    seed: int,
    n: int,
    start: int = 0,
    stream: int = 0,
) -> TrajectoryBatch:
    """Sample trajectories ``start .. start+n-1`` of stream ``(seed, stream)``."""
    policy.check_compatible(mdp)
    T = mdp.horizon
    u = trajectory_uniforms(seed, n, T, start, stream)
    pol_cdf = _inverse_cdf_tables(policy.probs)
    tr_cdf = _inverse_cdf_tables(mdp.transition)
    init_cdf = _inverse_cdf_tables(mdp.initial_dist)

    states = np.empty((n, T), dtype=np.int64)
    actions = np.empty((n, T), dtype=np.int64)
    s = _draw(np.broadcast_to(init_cdf, (n, mdp.n_states)), u[:, 0])
    for t in range(T):
        states[:, t] = s
        a = _draw(pol_cdf[s], u[:, 1 + t])
        actions[:, t] = a
        if t < T - 1:
            s = _draw(tr_cdf[s, a], u[:, 1 + T + t])
    return TrajectoryBatch.from_arrays(mdp, states, actions)


def sample_trajectory(
    mdp: TabularMDP, policy: SoftmaxPolicy, seed: int, index: int = 0, stream: int = 0
) -> Trajectory:
    """Sample one trajectory; identical arguments give a bit-identical result."""
    return sample_batch(mdp, policy, seed, 1, start=index, stream=stream)[0]
