import itertools
import math

import numpy as np
import pytest

from cvgradlab.mdp import SoftmaxPolicy, bundled_mdp, compute_returns, score, validate_mdp


@pytest.fixture(scope="session")
def bandit():
    return bundled_mdp("bandit2")


@pytest.fixture(scope="session")
def chain5():
    return bundled_mdp("chain5")


@pytest.fixture(scope="session")
def chain3(chain5):
    return chain5.with_horizon(3)


@pytest.fixture(scope="session")
def chain4(chain5):
    return chain5.with_horizon(4)


def zero_reward(mdp):
    return validate_mdp({**mdp.to_dict(), "reward": np.zeros_like(mdp.reward).tolist()})


def deterministic_chain(horizon=4):
    """3 states, 2 actions, one-hot transitions (action 0 stays, action 1 moves right, wrapping)."""
    trans = [[[1.0 if s2 == s else 0.0 for s2 in range(3)], [1.0 if s2 == (s + 1) % 3 else 0.0 for s2 in range(3)]]
             for s in range(3)]
    return validate_mdp({
        "n_states": 3, "n_actions": 2, "gamma": 0.8, "horizon": horizon,
        "initial_dist": [0.5, 0.5, 0.0], "transition": trans,
        "reward": [[0.0, 1.0], [0.5, -1.0], [2.0, 0.0]],
    })


def random_theta(mdp, seed, scale=1.0):
    return SoftmaxPolicy.for_mdp(mdp, scale * np.random.default_rng(seed).standard_normal(mdp.dim))


def brute_force(mdp, policy, weight_fn=None):
    """Independent oracle: loop over every (s_0, a_0, ..., s_{T-1}, a_{T-1}) in pure Python.

    Yields (prob, states, actions, returns, draw) where draw is
    sum_t gamma**t * score(s_t, a_t) * weight_fn(t, states, actions, returns) (REINFORCE by default).
    """
    T, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    pi = policy.probs
    if weight_fn is None:
        weight_fn = lambda t, st, ac, ret: ret[t]
    for seq in itertools.product(range(S), range(A), repeat=T):
        states, actions = seq[0::2], seq[1::2]
        p = mdp.initial_dist[states[0]]
        for t in range(T):
            p *= pi[states[t], actions[t]]
            if t + 1 < T:
                p *= mdp.transition[states[t], actions[t], states[t + 1]]
        if p == 0:
            continue
        rewards = [mdp.reward[s, a] for s, a in zip(states, actions)]
        ret = compute_returns(rewards, mdp.gamma)
        draw = sum(mdp.gamma**t * score(policy, states[t], actions[t]) * weight_fn(t, states, actions, ret) for t in range(T))
        yield p, states, actions, ret, draw


def brute_mean(mdp, policy, weight_fn=None):
    rows = list(brute_force(mdp, policy, weight_fn))
    return np.array([math.fsum(p * d[j] for p, _, _, _, d in rows) for j in range(mdp.dim)])


def brute_moments(mdp, policy, weight_fn=None):
    rows = list(brute_force(mdp, policy, weight_fn))
    mean = np.array([math.fsum(p * d[j] for p, _, _, _, d in rows) for j in range(mdp.dim)])
    cov = sum(p * np.outer(d - mean, d - mean) for p, _, _, _, d in rows)
    return mean, cov


def brute_q(mdp, policy):
    """Q[t][s][a] = E[R_t | s_t = s, a_t = a] by conditioning the enumeration (reachable pairs only)."""
    T, S, A = mdp.horizon, mdp.n_states, mdp.n_actions
    num = np.zeros((T, S, A))
    den = np.zeros((T, S, A))
    for p, states, actions, ret, _ in brute_force(mdp, policy, lambda *a: 0.0):
        for t in range(T):
            num[t, states[t], actions[t]] += p * ret[t]
            den[t, states[t], actions[t]] += p
    return num, den


def exact_lambda(mdp, policy, basis):
    """Per-coordinate optimal lambda from exact joint moments E[T T^T] and E[m T] (T is zero-mean)."""
    from cvgradlab import control_variates as cv
    from cvgradlab import estimators as est
    from cvgradlab.exact import exact_expectation

    D, d = mdp.dim, basis.d

    def joint(b):
        m = est.reinforce_draws(b, policy)
        f = cv.control_variate_features(b, policy, basis)
        return np.concatenate([np.einsum("nj,nji->nji", m, f).reshape(len(b), -1),
                               np.einsum("nji,njk->njik", f, f).reshape(len(b), -1)], axis=1)

    out = exact_expectation(mdp, policy, joint)
    cross = out[: D * d].reshape(D, d)
    gram = out[D * d:].reshape(D, d, d)
    return np.stack([np.linalg.solve(gram[j], cross[j]) for j in range(D)])
