import itertools

import numpy as np
import pytest

from pbkd.errors import EmptyDataset, UnknownState
from pbkd.harness.checks import central_difference, random_tabular
from pbkd.policies import (
    BCOptions,
    SoftmaxLinearPolicy,
    TabularPolicy,
    action_distribution,
    behavior_cloning_fit,
    best_of_n,
    dp_optimal_policy,
    dumps_policy,
    exact_value,
    feature_expectation,
    loads_policy,
    log_prob,
    mc_value,
    score_gradient,
    teacher_policy,
)
from pbkd.reward_model import LinearReward
from pbkd.seq_mdp import TokenMdp, enumerate_trajectories, make_trajectory, rollout, sample_actions, sample_prompts

from conftest import constant_table


def random_mdp(rng, max_vocab=3, max_horizon=3, **kw):
    return TokenMdp(
        int(rng.integers(2, max_vocab + 1)), int(rng.integers(1, max_horizon + 1)),
        prompt_count=int(rng.integers(1, 4)), feature_dim=int(rng.integers(2, 7)),
        gamma=float(rng.choice([0.5, 1.0])), feature_seed=int(rng.integers(2**31)), **kw,
    )


def random_softmax(mdp, rng, scale=1.0):
    W = rng.normal(scale=scale, size=(SoftmaxLinearPolicy.n_state_features(mdp), mdp.vocab_size))
    return SoftmaxLinearPolicy(W, context_len=mdp.context_len)


def all_states(mdp):
    for h in range(mdp.horizon):
        yield from itertools.product(range(mdp.vocab_size), repeat=h)


class TestActionDistribution:
    def test_zero_weights_uniform(self, tiny_mdp):
        pol = SoftmaxLinearPolicy.uniform(tiny_mdp)
        for state in all_states(tiny_mdp):
            np.testing.assert_allclose(action_distribution(pol, tiny_mdp, 1, state), 1 / 3, atol=1e-15)

    def test_high_temperature_flattens(self, tiny_mdp, rng):
        W = rng.uniform(-1, 1, size=(SoftmaxLinearPolicy.n_state_features(tiny_mdp), 3))
        pol = SoftmaxLinearPolicy(W, temperature=1e4)
        for state in all_states(tiny_mdp):
            p = action_distribution(pol, tiny_mdp, 0, state)
            assert p.max() - p.min() <= 1e-3

    def test_shift_invariance_and_normalization(self, tiny_mdp, rng):
        pol = random_softmax(tiny_mdp, rng, 3.0)
        shifted = pol.with_weights(pol.W + rng.normal(size=(pol.W.shape[0], 1)) * 5.0)
        for x in range(tiny_mdp.prompt_count):
            for state in all_states(tiny_mdp):
                p = action_distribution(pol, tiny_mdp, x, state)
                assert abs(p.sum() - 1) <= 1e-12 and np.all(p > 0)
                np.testing.assert_allclose(action_distribution(shifted, tiny_mdp, x, state), p, atol=1e-12)

    def test_tabular_off_support(self, tiny_mdp):
        teacher = TabularPolicy.from_mapping(tiny_mdp, {(0, ()): [1, 0, 0]})
        with pytest.raises(UnknownState):
            action_distribution(teacher, tiny_mdp, 0, (1,))

    def test_terminal_state_rejected(self, tiny_mdp):
        with pytest.raises(UnknownState):
            action_distribution(SoftmaxLinearPolicy.uniform(tiny_mdp), tiny_mdp, 0, (0, 0, 0))


class TestLogProb:
    def test_deterministic_own_rollout(self, tiny_mdp, rng):
        teacher = dp_optimal_policy(tiny_mdp, rng.normal(size=5))
        assert log_prob(teacher, tiny_mdp, rollout(tiny_mdp, teacher, 1, rng)) == 0.0

    def test_uniform(self):
        mdp = TokenMdp(4, 3)
        traj = make_trajectory(mdp, 0, (3, 1, 2))
        assert log_prob(SoftmaxLinearPolicy.uniform(mdp), mdp, traj) == pytest.approx(3 * np.log(0.25), abs=1e-12)

    def test_probabilities_sum_to_one(self, rng):
        mdp = TokenMdp(3, 3, prompt_count=2, feature_dim=3, context_len=2)
        pol = random_softmax(mdp, rng, 2.0)
        for x in range(2):
            total = sum(np.exp(log_prob(pol, mdp, t)) for t in enumerate_trajectories(mdp, x))
            assert abs(total - 1) <= 1e-10


class TestValues:
    def test_zero_reward(self, tiny_mdp, rng):
        assert exact_value(tiny_mdp, random_softmax(tiny_mdp, rng), np.zeros(5)) == 0.0

    def test_deterministic_policy_single_support(self, rng):
        mdp = TokenMdp(3, 3, prompt_count=2, feature_dim=4, prompt_distribution=(0.3, 0.7))
        theta = rng.normal(size=4)
        pol = dp_optimal_policy(mdp, rng.normal(size=4))
        expected = sum(
            mdp.d0[x] * theta @ rollout(mdp, pol, x, rng).features for x in range(2)
        )
        assert exact_value(mdp, pol, theta) == pytest.approx(expected, abs=1e-14)

    def test_uniform_brute_force(self, rng):
        mdp = TokenMdp(2, 2, feature_dim=3, feature_seed=4)
        theta = rng.normal(size=3)
        brute = np.mean([theta @ t.features for t in enumerate_trajectories(mdp, 0)])
        assert exact_value(mdp, SoftmaxLinearPolicy.uniform(mdp), theta) == pytest.approx(brute, abs=1e-14)

    def test_linearity(self, rng):
        for _ in range(20):
            mdp = random_mdp(rng)
            pol = random_softmax(mdp, rng)
            t1, t2 = rng.normal(size=(2, mdp.feature_dim))
            a, b = rng.normal(size=2)
            lhs = exact_value(mdp, pol, a * t1 + b * t2)
            rhs = a * exact_value(mdp, pol, t1) + b * exact_value(mdp, pol, t2)
            assert abs(lhs - rhs) <= 1e-10

    def test_mc_within_three_standard_errors(self):
        rng = np.random.default_rng(1)
        misses = 0
        for _ in range(100):
            mdp = random_mdp(rng)
            pol = random_softmax(mdp, rng)
            theta = rng.normal(size=mdp.feature_dim)
            est = mc_value(mdp, pol, theta, 500, rng)
            misses += abs(est.value - exact_value(mdp, pol, theta)) > 3 * est.stderr
        assert misses == 0

    def test_mc_single_sample_deterministic(self, rng):
        mdp = TokenMdp(3, 3, feature_dim=4)
        pol = dp_optimal_policy(mdp, rng.normal(size=4))
        theta = rng.normal(size=4)
        assert mc_value(mdp, pol, theta, 1, rng).value == exact_value(mdp, pol, theta)

    def test_mc_variance_scaling(self):
        rng = np.random.default_rng(2)
        mdp = TokenMdp(3, 3, prompt_count=2, feature_dim=4)
        pol = random_softmax(mdp, rng)
        theta = rng.normal(size=4)
        ns = [16, 32, 64, 128, 256, 512, 1024]
        var = [np.var([mc_value(mdp, pol, theta, n, rng).value for _ in range(400)]) for n in ns]
        slope = np.polyfit(np.log(ns), np.log(var), 1)[0]
        assert -1.2 <= slope <= -0.8

    def test_feature_expectation_properties(self, rng):
        for _ in range(100):
            mdp = random_mdp(rng)
            pol = random_softmax(mdp, rng)
            theta = rng.normal(size=mdp.feature_dim)
            fe = feature_expectation(mdp, pol)
            assert abs(theta @ fe - exact_value(mdp, pol, theta)) <= 1e-12
            assert np.linalg.norm(fe) <= 1 + 1e-12

    def test_feature_expectation_deterministic(self, rng):
        mdp = TokenMdp(3, 3, prompt_count=2, feature_dim=4, prompt_distribution=(1.0, 0.0))
        pol = dp_optimal_policy(mdp, rng.normal(size=4))
        traj = rollout(mdp, pol, 0, rng)
        np.testing.assert_allclose(feature_expectation(mdp, pol), traj.features, atol=1e-15)

    def test_policy_gradient_identity(self):
        # the finite-difference target is the exact value: common random numbers
        # through inverse-CDF sampling give a piecewise-constant estimate
        rng = np.random.default_rng(3)
        for _ in range(5):
            mdp = TokenMdp(2, 2, feature_dim=3, feature_seed=int(rng.integers(100)))
            pol = random_softmax(mdp, rng, 0.5)
            theta = rng.normal(size=3)
            fd = central_difference(lambda W: exact_value(mdp, pol.with_weights(W), theta), pol.W.copy(), 1e-6)
            grads = []
            for _ in range(200):
                xs = sample_prompts(mdp, 50, rng)
                acts = sample_actions(mdp, pol, xs, rng)
                vals = mdp.batch_features(xs, acts) @ theta
                grads.append(score_gradient(mdp, pol, xs, acts, vals / 50).ravel())
            grads = np.array(grads)
            se = grads.std(axis=0, ddof=1) / np.sqrt(len(grads))
            assert np.all(np.abs(grads.mean(axis=0) - fd.ravel()) <= 3 * se + 1e-9)


class TestDynamicProgramming:
    def test_action_independent_reward(self):
        args = dict(vocab_size=3, horizon=3, feature_dim=2)
        mdp = TokenMdp(**args, feature_table=constant_table(args, lambda h: np.array([1.0, h]) / np.hypot(1, h) / 3))
        theta = np.array([0.4, -0.7])
        pol = dp_optimal_policy(mdp, theta)
        constant = theta @ enumerate_trajectories(mdp, 0)[0].features
        assert pol.is_deterministic()
        assert exact_value(mdp, pol, theta) == pytest.approx(constant, abs=1e-14)

    def test_binary_brute_force(self, rng):
        for seed in range(10):
            mdp = TokenMdp(2, 2, feature_dim=4, feature_seed=seed)
            theta = rng.normal(size=4)
            best = max(theta @ t.features for t in enumerate_trajectories(mdp, 0))
            assert exact_value(mdp, dp_optimal_policy(mdp, theta), theta) == pytest.approx(best, abs=1e-12)

    def test_dominates_every_trajectory(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            mdp = random_mdp(rng, max_horizon=4)
            theta = rng.normal(size=mdp.feature_dim)
            pol = dp_optimal_policy(mdp, theta)
            for x in range(mdp.prompt_count):
                own = theta @ rollout(mdp, pol, x, rng).features
                assert np.max(mdp.feature_matrix[x] @ theta) <= own + 1e-10

    def test_ties_go_to_smallest_action(self):
        mdp = TokenMdp(3, 2, feature_dim=2)
        pol = dp_optimal_policy(mdp, np.zeros(2))
        assert all(np.all(t[..., 0] == 1.0) for t in pol.tables)

    def test_soft_teacher_is_a_distribution(self, tiny_mdp, rng):
        teacher = teacher_policy(tiny_mdp, rng.normal(size=5), temperature=0.5)
        for t in teacher.tables:
            np.testing.assert_allclose(t.sum(axis=-1), 1.0, atol=1e-12)


class TestBehaviorCloning:
    def test_repeated_trajectory_concentrates(self):
        mdp = TokenMdp(2, 2, feature_dim=2)
        traj = make_trajectory(mdp, 0, (1, 0))
        res = behavior_cloning_fit(mdp, [traj] * 5, SoftmaxLinearPolicy.uniform(mdp))
        assert np.exp(log_prob(res.policy, mdp, traj)) >= 0.99

    def test_stationary_at_optimum(self):
        mdp = TokenMdp(2, 2, feature_dim=2)
        res = behavior_cloning_fit(mdp, enumerate_trajectories(mdp, 0), SoftmaxLinearPolicy.uniform(mdp), BCOptions(epochs=20))
        assert np.max(np.abs(np.diff(res.losses))) <= 1e-9

    def test_loss_non_increasing(self, tiny_mdp, rng):
        teacher = teacher_policy(tiny_mdp, rng.normal(size=5), temperature=1.0)
        xs = sample_prompts(tiny_mdp, 100, rng)
        res = behavior_cloning_fit(tiny_mdp, (xs, sample_actions(tiny_mdp, teacher, xs, rng)), SoftmaxLinearPolicy.uniform(tiny_mdp))
        assert np.all(np.diff(res.losses) <= 1e-12)

    def test_order_invariant(self, tiny_mdp, rng):
        xs = sample_prompts(tiny_mdp, 60, rng)
        acts = sample_actions(tiny_mdp, SoftmaxLinearPolicy.uniform(tiny_mdp), xs, rng)
        perm = rng.permutation(60)
        init = SoftmaxLinearPolicy.uniform(tiny_mdp)
        a = behavior_cloning_fit(tiny_mdp, (xs, acts), init, BCOptions(epochs=30)).policy
        b = behavior_cloning_fit(tiny_mdp, (xs[perm], acts[perm]), init, BCOptions(epochs=30)).policy
        assert np.array_equal(a.W, b.W)

    def test_empty(self, tiny_mdp):
        with pytest.raises(EmptyDataset):
            behavior_cloning_fit(tiny_mdp, [], SoftmaxLinearPolicy.uniform(tiny_mdp))


class TestBestOfN:
    def test_single_sample_is_a_rollout(self, tiny_mdp, rng):
        pol = random_softmax(tiny_mdp, rng)
        rm = LinearReward(np.ones(5) * 0.3, 2.0)
        for seed in range(20):
            a = best_of_n(tiny_mdp, pol, rm, 1, 1, np.random.default_rng(seed))
            b = rollout(tiny_mdp, pol, 1, np.random.default_rng(seed))
            assert a.actions == b.actions

    def test_selection_beats_plain_rollouts(self, rng):
        mdp = TokenMdp(3, 3, prompt_count=4, feature_dim=8, feature_seed=1)
        rstar = LinearReward.projected(rng.normal(size=8), 2.0)
        pol = SoftmaxLinearPolicy.uniform(mdp)
        xs = sample_prompts(mdp, 1000, rng)
        picked = np.mean([rstar.theta @ best_of_n(mdp, pol, rstar, int(x), 10, rng).features for x in xs])
        plain = np.mean([rstar.theta @ rollout(mdp, pol, int(x), rng).features for x in xs])
        assert picked >= plain

    def test_deterministic_policy(self, tiny_mdp, rng):
        pol = dp_optimal_policy(tiny_mdp, rng.normal(size=5))
        only = rollout(tiny_mdp, pol, 0, rng).actions
        for n in (1, 4, 9):
            assert best_of_n(tiny_mdp, pol, rng.normal(size=5), 0, n, rng).actions == only


def test_policy_records_round_trip(tiny_mdp, rng):
    for pol in (random_softmax(tiny_mdp, rng), random_tabular(tiny_mdp, rng)):
        back = loads_policy(dumps_policy(pol))
        for h in range(tiny_mdp.horizon):
            xs = np.repeat(np.arange(2), 3**h)
            pre = np.tile(np.arange(3**h), 2)
            assert np.array_equal(back.probs_at(tiny_mdp, xs, h, pre), pol.probs_at(tiny_mdp, xs, h, pre))
