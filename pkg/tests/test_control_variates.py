import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvgradlab import control_variates as cv
from cvgradlab import estimators as est
from cvgradlab.errors import DegenerateControl, DimensionMismatch, LengthMismatch, SingularGram
from cvgradlab.exact import exact_expectation, exact_policy_gradient, exact_values
from cvgradlab.mdp import SoftmaxPolicy, sample_batch

from conftest import exact_lambda, random_theta, zero_reward


def correlated_instance(seed, n=10_000, d=3):
    rng = np.random.default_rng(seed)
    t = rng.standard_normal((n, d)) @ rng.standard_normal((d, d))
    m = t @ rng.standard_normal(d) + rng.standard_normal(n)
    return m, t


class TestOptimalAlpha:
    def test_hand_example(self):
        m, t = [1.0, 2.0, 3.0], [2.0, 4.0, 6.0]
        alpha, rho = cv.optimal_alpha(m, t, tau=4.0)
        assert alpha == 0.5
        assert rho == pytest.approx(1.0, abs=1e-15)
        adjusted = cv.adjust(m, t, alpha, tau=4.0)
        np.testing.assert_array_equal(adjusted, [2.0, 2.0, 2.0])
        assert cv.population_variance(adjusted) == 0.0

    def test_identical_streams(self):
        m = np.random.default_rng(0).standard_normal(1000)
        alpha, rho = cv.optimal_alpha(m, m)
        assert alpha == pytest.approx(1.0, abs=1e-12)
        assert rho == pytest.approx(1.0, abs=1e-12)

    def test_independent_streams(self):
        rng = np.random.default_rng(1)
        alpha, _ = cv.optimal_alpha(rng.standard_normal(100_000), rng.standard_normal(100_000))
        assert abs(alpha) < 0.05

    def test_degenerate(self):
        with pytest.raises(DegenerateControl):
            cv.optimal_alpha([1.0, 2.0, 3.0], [5.0, 5.0, 5.0])

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            cv.optimal_alpha([1.0, 2.0], [1.0, 2.0, 3.0])

    def test_variance_formula(self):
        """Var(m - alpha t) = Var(m) (1 - rho^2) at the optimum."""
        m, t = correlated_instance(3, d=1)
        alpha, rho = cv.optimal_alpha(m, t[:, 0])
        after = cv.population_variance(cv.adjust(m, t[:, 0], alpha))
        assert after == pytest.approx(cv.population_variance(m) * (1 - rho**2), rel=1e-10)


class TestSolvers:
    def test_d1_matches_alpha(self):
        m, t = correlated_instance(4, d=1)
        alpha, _ = cv.optimal_alpha(m, t[:, 0])
        for solve in (cv.solve_lambda_direct, cv.solve_lambda_orthogonal):
            assert solve(m, t).lam[0] == pytest.approx(alpha, rel=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_routes_agree(self, seed):
        m, t = correlated_instance(seed, d=1 + seed % 5)
        a, b = cv.solve_lambda_direct(m, t), cv.solve_lambda_orthogonal(m, t)
        np.testing.assert_allclose(a.lam, b.lam, rtol=1e-8, atol=1e-12)
        assert a.variance_after == pytest.approx(b.variance_after, rel=1e-8)
        assert a.variance_after == pytest.approx(a.variance_measured, rel=1e-8)

    def test_orthogonal_basis(self):
        """With uncorrelated columns every lambda_i is its own scalar fit."""
        rng = np.random.default_rng(5)
        raw = rng.standard_normal((2000, 3))
        t, _ = np.linalg.qr(raw - raw.mean(axis=0))  # centred, then orthonormal: stays centred
        m = t @ np.array([1.0, -2.0, 0.5]) + 0.01 * rng.standard_normal(2000)
        lam = cv.solve_lambda_orthogonal(m, t).lam
        for i in range(3):
            assert lam[i] == pytest.approx(cv.optimal_alpha(m, t[:, i])[0], rel=1e-10)

    @pytest.mark.parametrize("solve", [cv.solve_lambda_direct, cv.solve_lambda_orthogonal])
    def test_duplicated_column(self, solve):
        m, t = correlated_instance(6, d=2)
        with pytest.raises(SingularGram):
            solve(m, np.column_stack([t, t[:, 0]]))

    def test_gram_is_psd_and_symmetric(self):
        m, t = correlated_instance(7, d=4)
        sol = cv.solve_lambda_direct(m, t)
        np.testing.assert_array_equal(sol.gram, sol.gram.T)
        assert np.linalg.eigvalsh(sol.gram).min() > 0
        assert sol.variance_after <= sol.variance_before

    @pytest.mark.parametrize("k", range(3))
    @pytest.mark.parametrize("step", [0.1, -0.1])
    def test_perturbation_increases_variance(self, k, step):
        m, t = correlated_instance(8, d=3)
        sol = cv.solve_lambda_direct(m, t)
        lam = sol.lam.copy()
        lam[k] += step
        assert cv.population_variance(cv.adjust(m, t, lam)) > sol.variance_measured

    def test_residual_orthogonality(self):
        m, t = correlated_instance(9, d=4)
        inner, scale = cv.residual_inner_products(m, t, cv.solve_lambda_orthogonal(m, t).lam)
        assert np.abs(inner).max() <= 1e-8 * scale

    def test_too_few_samples(self):
        with pytest.raises(LengthMismatch):
            cv.solve_lambda_direct([1.0, 2.0], np.ones((2, 3)))

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 5), n=st.integers(50, 400))
    def test_routes_agree_property(self, seed, d, n):
        rng = np.random.default_rng(seed)
        t = rng.standard_normal((n, d))
        m = t @ rng.normal(size=d) + rng.standard_normal(n)
        a, b = cv.solve_lambda_direct(m, t), cv.solve_lambda_orthogonal(m, t)
        np.testing.assert_allclose(a.lam, b.lam, rtol=1e-8, atol=1e-10)
        assert a.variance_measured <= a.variance_before * (1 + 1e-12)


class TestCombined:
    def test_banditexact_lambda(self, bandit):
        pol = SoftmaxPolicy.zeros(bandit)
        tb = exact_values(bandit, pol)
        basis = cv.make_basis(["const"], tb, bandit, pol)
        lam = exact_lambda(bandit, pol, basis)
        np.testing.assert_allclose(lam, [[0.5], [0.5]], atol=1e-15)
        mean = exact_expectation(bandit, pol, lambda b: cv.combined_draws(b, pol, basis, lam))
        second = exact_expectation(bandit, pol, lambda b: cv.combined_draws(b, pol, basis, lam) ** 2)
        np.testing.assert_allclose(second - mean**2, 0.0, atol=1e-15)

    def test_bandit_fit(self, bandit):
        pol = SoftmaxPolicy.zeros(bandit)
        basis = cv.make_basis(["const"], exact_values(bandit, pol))
        fit = cv.fit_combined(bandit, pol, None, basis, 100_000, seed=3)
        np.testing.assert_allclose(fit.lam, 0.5, atol=0.05)
        assert not fit.degraded

    def test_lambda_zero_is_reinforce(self, chain3):
        pol = random_theta(chain3, 0)
        basis = cv.make_basis(list(cv.BASIS_NAMES), exact_values(chain3, pol))
        batch = sample_batch(chain3, pol, 1, 500)
        np.testing.assert_array_equal(
            cv.combined_draws(batch, pol, basis, np.zeros((chain3.dim, 3))), est.reinforce_draws(batch, pol)
        )

    def test_value_basis_unit_lambda(self, chain3):
        pol = random_theta(chain3, 1)
        tb = exact_values(chain3, pol)
        basis = cv.make_basis(["value"], tb)
        batch = sample_batch(chain3, pol, 2, 500)
        t = np.arange(3)[None, :]
        ref = est.score_weighted_draws(batch, pol, batch.returns - tb.v[t, batch.states])
        np.testing.assert_allclose(cv.combined_draws(batch, pol, basis, np.ones((chain3.dim, 1))), ref, atol=1e-12)

    def test_advantage_unit_lambda_is_aac(self, chain3):
        pol = random_theta(chain3, 2)
        tb = exact_values(chain3, pol)
        basis = cv.make_basis(["advantage"], tb)
        batch = sample_batch(chain3, pol, 3, 500)
        np.testing.assert_allclose(
            cv.combined_draws(batch, pol, basis, np.ones((chain3.dim, 1))), est.aac_draws(batch, pol, tb), atol=1e-12
        )

    @pytest.mark.parametrize("seed", range(5))
    def test_unbiased_for_any_lambda(self, chain3, seed):
        pol = random_theta(chain3, 3)
        basis = cv.make_basis(list(cv.BASIS_NAMES), exact_values(chain3, pol), chain3, pol)
        lam = np.random.default_rng(seed).normal(size=(chain3.dim, 3))
        mean = exact_expectation(chain3, pol, lambda b: cv.combined_draws(b, pol, basis, lam))
        np.testing.assert_allclose(mean, exact_policy_gradient(chain3, pol).grad, atol=1e-10)

    def test_single_trajectory_form(self, chain3):
        pol = random_theta(chain3, 4)
        tb = exact_values(chain3, pol)
        basis = cv.make_basis(list(cv.BASIS_NAMES), tb)
        lam = np.full((chain3.dim, 3), 0.3)
        batch = sample_batch(chain3, pol, 5, 10)
        np.testing.assert_allclose(
            cv.combined_estimator_sample(batch[4], pol, tb, basis, lam), cv.combined_draws(batch, pol, basis, lam)[4]
        )

    def test_zero_rewards(self, chain3):
        mdp = zero_reward(chain3)
        pol = random_theta(mdp, 5)
        basis = cv.make_basis(["const", "value"], exact_values(mdp, pol))
        fit = cv.fit_combined(mdp, pol, None, basis, 2000, seed=0)
        assert not fit.lam.any()

    def test_pilot_size_does_not_hurt(self, chain4):
        pol = random_theta(chain4, 6)
        basis = cv.make_basis(list(cv.BASIS_NAMES), exact_values(chain4, pol))
        evaluation = sample_batch(chain4, pol, 11, 50_000)
        totals = []
        for n_pilot in (20_000, 40_000):
            lam = cv.fit_combined(chain4, pol, None, basis, n_pilot, seed=11).lam
            totals.append(cv.combined_draws(evaluation, pol, basis, lam).var(axis=0).sum())
        assert totals[1] <= totals[0] * 1.02

    def test_premise_checked(self, bandit):
        pol = SoftmaxPolicy.zeros(bandit)
        tb = exact_values(bandit, pol)
        bad = cv.CVBasis.from_phis([lambda t, s, a: bandit.reward[s, a]], ["reward"])
        with pytest.raises(ValueError, match="not zero-mean"):
            bad.verify_zero_mean(bandit, pol)
        with pytest.raises(ValueError, match="unknown basis"):
            cv.make_basis(["const", "quadratic"], tb)

    def test_shape_checks(self, chain3):
        pol = random_theta(chain3, 0)
        basis = cv.make_basis(["const"], exact_values(chain3, pol))
        with pytest.raises(DimensionMismatch):
            cv.combined_draws(sample_batch(chain3, pol, 0, 5), pol, basis, np.zeros(chain3.dim))
        with pytest.raises(ValueError):
            cv.fit_combined(chain3, pol, None, basis, 5, seed=0)
        with pytest.raises(ValueError):
            cv.CVBasis((), ())
