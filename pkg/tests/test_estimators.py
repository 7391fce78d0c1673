import numpy as np
import pytest

from cvgradlab import estimators as est
from cvgradlab.errors import DimensionMismatch
from cvgradlab.estimators import EstimatorId
from cvgradlab.exact import exact_expectation, exact_moments, exact_policy_gradient, exact_values
from cvgradlab.mdp import SoftmaxPolicy, Trajectory, compute_returns, sample_batch

from conftest import deterministic_chain, random_theta, zero_reward

ESTIMATORS = ("REINFORCE", "QAC", "AAC", "TDAC")


def bandit_traj(action):
    r = [1.0 if action == 0 else 0.0]
    return Trajectory(np.array([0]), np.array([action]), np.array(r), compute_returns(r, 0.9), 0.9)


@pytest.fixture(scope="module")
def bandit_setup(bandit):
    pol = SoftmaxPolicy.zeros(bandit)
    return pol, exact_values(bandit, pol)


class TestBanditDraws:
    def test_reinforce(self, bandit_setup):
        pol, _ = bandit_setup
        np.testing.assert_allclose(est.reinforce_sample(bandit_traj(0), pol), [0.5, -0.5])
        np.testing.assert_allclose(est.reinforce_sample(bandit_traj(1), pol), [0.0, 0.0])

    def test_qac(self, bandit_setup):
        pol, tb = bandit_setup
        np.testing.assert_allclose(est.qac_sample(bandit_traj(0), pol, tb), [0.5, -0.5])

    @pytest.mark.parametrize("action", [0, 1])
    def test_aac_and_tdac_constant(self, bandit_setup, action):
        pol, tb = bandit_setup
        np.testing.assert_allclose(est.aac_sample(bandit_traj(action), pol, tb), [0.25, -0.25])
        np.testing.assert_allclose(est.tdac_sample(bandit_traj(action), pol, tb), [0.25, -0.25])

    def test_phi_zero(self, bandit_setup):
        pol, _ = bandit_setup
        assert not est.score_weighted_sample(bandit_traj(0), pol, lambda t, s, a: 0.0).any()


@pytest.fixture(scope="module")
def sampled(chain5):
    pol = random_theta(chain5, 21)
    tb = exact_values(chain5, pol)
    return pol, tb, sample_batch(chain5, pol, 99, 2000)


class TestIdentities:
    def test_zero_rewards(self, chain5):
        mdp = zero_reward(chain5)
        pol = random_theta(mdp, 0)
        tb = exact_values(mdp, pol)
        batch = sample_batch(mdp, pol, 1, 100)
        for name in ESTIMATORS:
            assert not est.estimator_draws(name, batch, pol, tb).any()

    def test_baseline_identity(self, sampled):
        pol, tb, batch = sampled
        lhs = est.aac_draws(batch, pol, tb)
        rhs = est.qac_draws(batch, pol, tb) - est.phi_draws(batch, pol, lambda t, s, a: tb.v[t, s])
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_single_matches_batch(self, sampled):
        pol, tb, batch = sampled
        for i in (0, 5, 1999):
            np.testing.assert_allclose(est.tdac_sample(batch[i], pol, tb), est.tdac_draws(batch, pol, tb)[i], atol=1e-14)
            np.testing.assert_allclose(est.reinforce_sample(batch[i], pol), est.reinforce_draws(batch, pol)[i], atol=1e-14)

    def test_reinforce_matches_loop(self, sampled):
        from cvgradlab.mdp import score

        pol, _, batch = sampled
        tr = batch[3]
        ref = sum(tr.gamma**t * score(pol, int(s), int(a)) * R for t, (s, a, R) in enumerate(zip(tr.states, tr.actions, tr.returns)))
        np.testing.assert_allclose(est.reinforce_sample(tr, pol), ref, atol=1e-12)

    def test_td_equals_advantage_when_deterministic(self):
        mdp = deterministic_chain()
        pol = random_theta(mdp, 2)
        tb = exact_values(mdp, pol)
        batch = sample_batch(mdp, pol, 4, 500)
        np.testing.assert_allclose(est.tdac_draws(batch, pol, tb), est.aac_draws(batch, pol, tb), atol=1e-12)

    def test_dimension_mismatch(self, chain5, bandit, sampled):
        pol, tb, batch = sampled
        with pytest.raises(DimensionMismatch):
            est.reinforce_draws(batch, SoftmaxPolicy.zeros(bandit))
        short = exact_values(chain5.with_horizon(3), pol)
        with pytest.raises(DimensionMismatch):
            est.qac_draws(batch, pol, short)

    def test_estimator_id_parse(self):
        assert EstimatorId.parse("q-ac") is EstimatorId.QAC
        assert EstimatorId.parse("td_ac") is EstimatorId.TDAC
        with pytest.raises(ValueError):
            EstimatorId.parse("PPO")


@pytest.mark.parametrize("mdp_name", ["bandit", "chain3", "chain4"])
class TestExactUnbiasedness:
    def test_all_estimators(self, mdp_name, request):
        mdp = request.getfixturevalue(mdp_name)
        pol = random_theta(mdp, 8)
        tb = exact_values(mdp, pol)
        g = exact_policy_gradient(mdp, pol).grad
        for name in ESTIMATORS:
            mean = exact_expectation(mdp, pol, lambda b: est.estimator_draws(name, b, pol, tb))
            np.testing.assert_allclose(mean, g, atol=1e-10, err_msg=name)

    def test_null_terms(self, mdp_name, request):
        mdp = request.getfixturevalue(mdp_name)
        pol = random_theta(mdp, 9)
        tb = exact_values(mdp, pol)
        for phi in (lambda t, s, a: 1.0, lambda t, s, a: tb.v[t, s]):
            mean = exact_expectation(mdp, pol, lambda b: est.phi_draws(b, pol, phi))
            np.testing.assert_allclose(mean, 0.0, atol=1e-10)

    def test_q_condition(self, mdp_name, request):
        """REINFORCE - QAC is a zero-mean control variate."""
        mdp = request.getfixturevalue(mdp_name)
        pol = random_theta(mdp, 10)
        tb = exact_values(mdp, pol)
        mean = exact_expectation(mdp, pol, lambda b: est.reinforce_draws(b, pol) - est.qac_draws(b, pol, tb))
        np.testing.assert_allclose(mean, 0.0, atol=1e-10)


def test_premise_violation_is_nonzero(bandit):
    pol = SoftmaxPolicy.zeros(bandit)
    mean = exact_expectation(bandit, pol, lambda b: est.phi_draws(b, pol, lambda t, s, a: bandit.reward[s, a]))
    np.testing.assert_allclose(mean, [0.25, -0.25], atol=1e-15)


def test_exact_variance_ordering(chain3):
    pol = SoftmaxPolicy.zeros(chain3)
    tb = exact_values(chain3, pol)
    tv = {n: np.trace(exact_moments(chain3, pol, lambda b, n=n: est.estimator_draws(n, b, pol, tb))[1]) for n in ESTIMATORS}
    assert tv["AAC"] <= tv["TDAC"] + 1e-10
    assert tv["QAC"] <= tv["REINFORCE"] + 1e-10
