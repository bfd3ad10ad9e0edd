import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import cholesky

from pbkd.diagnostics import (
    CovarianceMatrix,
    build_sigma_offline,
    concentrability_linear,
    kappa_linear,
    l1_tv_sides,
    lemma_l1_tv_check,
    lemma_tv_logexp_check,
    policy_worst_case_gap,
    rate_fit,
    regret_curve,
    sampled_concentrability,
    suboptimality,
    tv_logexp_sides,
    weighted_norm,
    worst_case_gap,
)
from pbkd.errors import DimensionMismatch, EmptyDataset, NonPositivePoint
from pbkd.harness.checks import random_tabular
from pbkd.policies import SoftmaxLinearPolicy, TabularPolicy, dp_optimal_policy, teacher_policy
from pbkd.preference_data import PreferenceDataset, gen_offline
from pbkd.reward_model import LinearReward
from pbkd.seq_mdp import TokenMdp

from conftest import constant_table, unit_ball


def random_softmax(mdp, rng, scale=1.0):
    return SoftmaxLinearPolicy(rng.normal(scale=scale, size=(SoftmaxLinearPolicy.n_state_features(mdp), mdp.vocab_size)))


def always(mdp, token):
    V = mdp.vocab_size
    return TabularPolicy(tuple(np.tile(np.eye(V)[token], (mdp.prompt_count, V**h, 1)) for h in range(mdp.horizon)))


class TestSigma:
    def test_identical_deterministic_annotators(self, tiny_mdp, rng):
        mu = always(tiny_mdp, 1)
        exact = build_sigma_offline((mu, mu), tiny_mdp, 0.01, 2.0, mode="exact")
        assert np.array_equal(exact.matrix, 0.005 * np.eye(5))
        data = gen_offline(tiny_mdp, mu, mu, np.ones(5), 50, rng)
        assert np.array_equal(build_sigma_offline(data, tiny_mdp, 0.01, 2.0).matrix, 0.005 * np.eye(5))

    def test_empirical_converges_to_exact(self, tiny_mdp, rng):
        mu0, mu1 = random_tabular(tiny_mdp, rng), SoftmaxLinearPolicy.uniform(tiny_mdp)
        data = gen_offline(tiny_mdp, mu0, mu1, np.zeros(5), 10_000, rng)
        emp = build_sigma_offline(data, tiny_mdp, 0.01, 2.0)
        exact = build_sigma_offline((mu0, mu1), tiny_mdp, 0.01, 2.0, mode="exact")
        assert np.linalg.norm(emp.matrix - exact.matrix) <= 0.05

    @given(lam=st.floats(1e-8, 10.0), seed=st.integers(0, 2**31))
    @settings(max_examples=30, deadline=None)
    def test_cholesky_succeeds(self, lam, seed):
        rng = np.random.default_rng(seed)
        mdp = TokenMdp(2, 2, feature_dim=4, feature_seed=seed)
        sigma = build_sigma_offline((random_softmax(mdp, rng), random_softmax(mdp, rng)), mdp, lam, 2.0, mode="exact")
        cholesky(sigma.matrix)
        assert np.abs(sigma.matrix - sigma.matrix.T).max() <= 1e-10

    def test_empty_dataset(self, tiny_mdp):
        with pytest.raises(EmptyDataset):
            build_sigma_offline(PreferenceDataset.empty(3), tiny_mdp, 0.01, 2.0)

    def test_non_positive_ridge(self, tiny_mdp):
        u = SoftmaxLinearPolicy.uniform(tiny_mdp)
        with pytest.raises(ValueError):
            build_sigma_offline((u, u), tiny_mdp, 0.0, 2.0, mode="exact")


class TestWeightedNorm:
    def test_identity_is_euclidean(self, rng):
        v = rng.normal(size=4)
        assert weighted_norm(v, CovarianceMatrix(np.eye(4), 1.0, 1.0)) == pytest.approx(np.linalg.norm(v), rel=1e-14)

    def test_zero_vector(self):
        assert weighted_norm(np.zeros(3), CovarianceMatrix(2 * np.eye(3), 2.0, 1.0)) == 0.0

    def test_scaled_identity(self, rng):
        v = rng.normal(size=5)
        assert weighted_norm(v, CovarianceMatrix(4 * np.eye(5), 4.0, 1.0)) == pytest.approx(np.linalg.norm(v) / 2, rel=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            weighted_norm(np.ones(3), CovarianceMatrix(np.eye(4), 1.0, 1.0))

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError):
            CovarianceMatrix(np.diag([1.0, -1.0]), 1.0, 1.0)


class TestConcentrability:
    def test_same_policy(self, tiny_mdp, rng):
        teacher = random_tabular(tiny_mdp, rng)
        sigma = CovarianceMatrix(np.eye(5), 1.0, 1.0)
        assert concentrability_linear(tiny_mdp, teacher, teacher, sigma) == pytest.approx(0.0, abs=1e-12)

    def test_scaling_sigma_by_four_halves(self, tiny_mdp, rng):
        teacher, pistar = random_tabular(tiny_mdp, rng), dp_optimal_policy(tiny_mdp, rng.normal(size=5))
        sigma = build_sigma_offline((teacher, SoftmaxLinearPolicy.uniform(tiny_mdp)), tiny_mdp, 0.01, 2.0, mode="exact")
        full = concentrability_linear(tiny_mdp, teacher, pistar, sigma)
        assert concentrability_linear(tiny_mdp, teacher, pistar, sigma.scaled(4.0)) == pytest.approx(full / 2, rel=1e-12)

    def test_bound_dominates_sampled_ratio(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            mdp = TokenMdp(int(rng.integers(2, 4)), int(rng.integers(1, 4)), prompt_count=2,
                           feature_dim=int(rng.integers(2, 6)), feature_seed=int(rng.integers(2**31)))
            d = mdp.feature_dim
            rstar = LinearReward(unit_ball(rng, d, 2.0), 2.0)
            teacher = teacher_policy(mdp, rng.normal(size=d), temperature=1.0)
            probe = sampled_concentrability(mdp, teacher, dp_optimal_policy(mdp, rstar), random_tabular(mdp, rng),
                                            SoftmaxLinearPolicy.uniform(mdp), rstar, 0.01, 2.0, 1000, rng)
            assert probe.n_sampled == 1000
            assert probe.sampled_sup <= probe.bound + 1e-12


class TestKappa:
    def test_values(self):
        assert kappa_linear(0.0) == 4.0
        assert kappa_linear(1.0) == pytest.approx(9.524, abs=1e-3)
        assert kappa_linear(1.0) == pytest.approx(np.e**2 + np.e**-2 + 2, rel=1e-15)

    def test_monotone(self):
        grid = np.linspace(0, 5, 200)
        assert np.all(np.diff([kappa_linear(b) for b in grid]) > 0)


class TestLemmas:
    def test_equal_rewards_give_zero_sides(self, tiny_mdp, rng):
        mu0, mu1 = random_tabular(tiny_mdp, rng), SoftmaxLinearPolicy.uniform(tiny_mdp)
        theta = rng.normal(size=5)
        assert l1_tv_sides(tiny_mdp, mu0, mu1, theta, theta, kappa_linear(2.0)) == (0.0, 0.0)
        lhs, rhs = tv_logexp_sides(tiny_mdp, mu0, mu1, theta, theta)
        assert lhs == 0.0 and abs(rhs) <= 1e-15

    def test_l1_tv_holds(self):
        report = lemma_l1_tv_check(np.random.default_rng(0), 1000)
        assert report.trials == 1000 and report.violations == 0

    def test_halved_kappa_is_violated(self):
        report = lemma_l1_tv_check(np.random.default_rng(0), 200, kappa_scale=0.5)
        assert report.violations >= 1
        assert report.violations == sum(row[4] for row in report.rows())

    def test_tv_logexp_holds(self):
        report = lemma_tv_logexp_check(np.random.default_rng(1), 1000)
        assert report.violations == 0
        assert np.all(report.rhs >= 0)

    def test_report_rows(self):
        report = lemma_tv_logexp_check(np.random.default_rng(2), 3)
        rows = report.rows()
        assert [r[0] for r in rows] == [0, 1, 2]
        assert all(r[3] == pytest.approx(r[2] - r[1]) and r[4] is False for r in rows)


class TestSuboptimality:
    def test_optimal_student(self, tiny_mdp, rng):
        theta = rng.normal(size=5)
        pistar = dp_optimal_policy(tiny_mdp, theta)
        assert suboptimality(tiny_mdp, theta, pistar, pistar) == 0.0

    def test_uniform_student_by_hand(self):
        args = dict(vocab_size=2, horizon=2, feature_dim=2)
        # each step pays theta . e_a / 2
        table = constant_table(args, lambda h: np.eye(2) / 2)
        mdp = TokenMdp(**args, feature_table=table)
        theta = np.array([1.0, -0.4])
        pistar = dp_optimal_policy(mdp, theta)
        # optimum picks token 0 twice: 2 * 0.5; uniform averages the two tokens each step
        expected = 1.0 - 2 * 0.5 * (1.0 - 0.4) / 2
        assert suboptimality(mdp, theta, pistar, SoftmaxLinearPolicy.uniform(mdp)) == pytest.approx(expected, abs=1e-15)

    def test_never_negative(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            mdp = TokenMdp(int(rng.integers(2, 4)), int(rng.integers(1, 4)), prompt_count=int(rng.integers(1, 3)),
                           feature_dim=3, gamma=float(rng.choice([0.5, 1.0])), feature_seed=int(rng.integers(2**31)))
            theta = rng.normal(size=3)
            assert suboptimality(mdp, theta, dp_optimal_policy(mdp, theta), random_softmax(mdp, rng, 2.0)) >= -1e-12


class TestRegretCurve:
    def test_optimal_sequence(self, tiny_mdp, rng):
        theta = rng.normal(size=5)
        pistar = dp_optimal_policy(tiny_mdp, theta)
        curve = regret_curve([pistar] * 5, tiny_mdp, theta, pistar)
        assert np.array_equal(curve.per_step, np.zeros(5)) and np.array_equal(curve.cumulative, np.zeros(5))

    def test_constant_policy_is_linear(self, tiny_mdp, rng):
        theta = rng.normal(size=5)
        pistar = dp_optimal_policy(tiny_mdp, theta)
        u = SoftmaxLinearPolicy.uniform(tiny_mdp)
        curve = regret_curve([u] * 8, tiny_mdp, theta, pistar)
        step = suboptimality(tiny_mdp, theta, pistar, u)
        np.testing.assert_allclose(curve.cumulative, step * np.arange(1, 9), rtol=1e-12)

    def test_composes_suboptimality(self, tiny_mdp, rng):
        theta = rng.normal(size=5)
        pistar = dp_optimal_policy(tiny_mdp, theta)
        seq = [random_softmax(tiny_mdp, rng) for _ in range(10)]
        curve = regret_curve(seq, tiny_mdp, theta, pistar)
        subs = [suboptimality(tiny_mdp, theta, pistar, p) for p in seq]
        np.testing.assert_allclose(curve.cumulative, np.cumsum(subs), atol=1e-12)
        assert np.all(curve.per_step >= 0) and np.all(np.diff(curve.cumulative) >= 0)


class TestRateFit:
    def test_inverse_square_root(self):
        x = np.array([10.0, 100.0, 1000.0])
        fit = rate_fit(np.stack([x, 7 / np.sqrt(x)], axis=1))
        assert fit.slope == pytest.approx(-0.5, abs=1e-9)
        assert fit.intercept == pytest.approx(np.log(7), abs=1e-9)
        assert fit.residual_rms <= 1e-12

    def test_linear(self):
        fit = rate_fit([(1, 3), (2, 6), (5, 15)])
        assert fit.slope == pytest.approx(1.0, abs=1e-12)

    def test_noisy_power_law(self):
        rng = np.random.default_rng(0)
        x = np.logspace(1, 4, 20)
        hits = 0
        for _ in range(100):
            y = 5 / np.sqrt(x) * (1 + 0.1 * rng.normal(size=20))
            hits += -0.6 <= rate_fit(np.stack([x, y], axis=1)).slope <= -0.4
        assert hits >= 95

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            rate_fit([(1, 1), (2, 2)])

    @pytest.mark.parametrize("bad", [[(1, 1), (2, 0), (3, 3)], [(-1, 1), (2, 2), (3, 3)]])
    def test_non_positive(self, bad):
        with pytest.raises(NonPositivePoint):
            rate_fit(bad)


class TestWorstCase:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.diffs = rng.normal(scale=0.5, size=(300, 4))
        theta = np.array([1.0, -0.5, 0.3, 0.0])
        self.labels = (rng.random(300) < 1 / (1 + np.exp(-self.diffs @ theta))).astype(np.int64)
        self.gap = rng.normal(size=4)

    def test_loose_set_reaches_ball_boundary(self):
        wc = worst_case_gap(self.gap, self.diffs, self.labels, 2.0, 1e9, np.random.default_rng(0))
        assert wc.value == pytest.approx(2.0 * np.linalg.norm(self.gap), abs=1e-6)
        assert wc.feasible_restarts > 0

    def test_tight_set_stays_near_mle(self):
        from pbkd.reward_model import maximize_penalized

        mle = maximize_penalized(self.diffs, self.labels, 2.0)[0]
        wc = worst_case_gap(self.gap, self.diffs, self.labels, 2.0, 1e-8, np.random.default_rng(0), theta_mle=mle)
        assert wc.value == pytest.approx(mle @ self.gap, abs=1e-3)

    def test_value_grows_with_slack(self):
        vals = [worst_case_gap(self.gap, self.diffs, self.labels, 2.0, z, np.random.default_rng(0)).value
                for z in (0.5, 2.0, 8.0)]
        assert vals[0] <= vals[1] + 1e-8 <= vals[2] + 2e-8

    def test_policy_wrapper(self, tiny_mdp, rng):
        teacher = random_tabular(tiny_mdp, rng)
        data = gen_offline(tiny_mdp, teacher, SoftmaxLinearPolicy.uniform(tiny_mdp), np.ones(5) * 0.5, 200, rng)
        same = policy_worst_case_gap(tiny_mdp, teacher, teacher, data, 2.0, rng, restarts=3)
        assert abs(same.value) <= 1e-12
