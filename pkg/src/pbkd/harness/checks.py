"""Randomized numerical self-checks on tiny MDPs, shared by the CLI and the test suite."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pbkd.adversarial import clipped_gradient, clipped_surrogate, PrefData
from pbkd.mm_pbkd import induced_reward, induced_reward_tables, pdl_gap, q_teacher_exact
from pbkd.pbkd_online import reward_gradient, reward_objective
from pbkd.policies import SoftmaxLinearPolicy, TabularPolicy, exact_value, step_reward_tables
from pbkd.reward_model import loglik_arrays, loglik_grad_arrays
from pbkd.seq_mdp import TokenMdp, sample_actions, sample_prompts


@dataclass
class TinyInstance:
    mdp: TokenMdp
    teacher: TabularPolicy
    student: SoftmaxLinearPolicy
    theta: np.ndarray
    bound: float


def random_tabular(mdp: TokenMdp, rng: np.random.Generator, concentration: float = 1.0) -> TabularPolicy:
    P, V = mdp.prompt_count, mdp.vocab_size
    return TabularPolicy(tuple(rng.dirichlet(np.full(V, concentration), size=(P, V**h)) for h in range(mdp.horizon)))


def random_tiny_instance(rng: np.random.Generator, max_vocab: int = 3, max_horizon: int = 4) -> TinyInstance:
    V = int(rng.integers(2, max_vocab + 1))
    H = int(rng.integers(1, max_horizon + 1))
    mdp = TokenMdp(
        V,
        H,
        prompt_count=int(rng.integers(1, 4)),
        feature_dim=int(rng.integers(2, 7)),
        gamma=float(rng.choice([0.5, 1.0])),
        context_len=int(rng.integers(1, H + 1)),
        feature_seed=int(rng.integers(2**31)),
    )
    student = SoftmaxLinearPolicy(rng.normal(size=(SoftmaxLinearPolicy.n_state_features(mdp), V)), context_len=mdp.context_len)
    bound = float(rng.uniform(0.5, 3.0))
    theta = rng.normal(size=mdp.feature_dim)
    theta *= bound * rng.random() / np.linalg.norm(theta)
    return TinyInstance(mdp, random_tabular(mdp, rng), student, theta, bound)


def pdl_errors(rng: np.random.Generator, n: int = 100) -> np.ndarray:
    """``|pdl_gap(Q_teacher) - (J_teacher - J_student)|`` on ``n`` random instances."""
    out = np.empty(n)
    for i in range(n):
        inst = random_tiny_instance(rng)
        q = q_teacher_exact(inst.mdp, inst.teacher, inst.theta)
        direct = exact_value(inst.mdp, inst.teacher, inst.theta) - exact_value(inst.mdp, inst.student, inst.theta)
        out[i] = abs(pdl_gap(inst.mdp, inst.teacher, inst.student, q) - direct)
    return out


def bellman_errors(rng: np.random.Generator, n: int = 100, pointwise_samples: int = 20) -> np.ndarray:
    """Largest gap between the induced reward of ``Q_teacher`` and the step reward, per instance.

    Whole tables are compared, plus ``pointwise_samples`` random state-action
    pairs through the scalar accessor.
    """
    out = np.empty(n)
    for i in range(n):
        inst = random_tiny_instance(rng)
        mdp = inst.mdp
        q = q_teacher_exact(mdp, inst.teacher, inst.theta)
        rewards = step_reward_tables(mdp, inst.theta)
        induced = induced_reward_tables(q, mdp, inst.teacher)
        err = max(float(np.max(np.abs(a - b))) for a, b in zip(induced, rewards))
        for _ in range(pointwise_samples):
            x = int(rng.integers(mdp.prompt_count))
            h = int(rng.integers(mdp.horizon))
            state = [int(a) for a in rng.integers(mdp.vocab_size, size=h)]
            a = int(rng.integers(mdp.vocab_size))
            code = 0
            for s in state:
                code = code * mdp.vocab_size + s
            val = induced_reward(q, mdp, inst.teacher, x, state, a)
            err = max(err, abs(val - float(rewards[h][x, code, a])))
        out[i] = err
    return out


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def central_difference(f, x: np.ndarray, h: float) -> np.ndarray:
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        up = f(x)
        flat[j] = orig - h
        down = f(x)
        flat[j] = orig
        gflat[j] = (up - down) / (2 * h)
    return g


def _pref_problem(rng: np.random.Generator, n: int | None = None):
    d = int(rng.integers(2, 9))
    n = n or int(rng.integers(5, 200))
    diffs = rng.normal(scale=0.5, size=(n, d))
    labels = rng.integers(0, 2, size=n)
    theta = rng.normal(size=d)
    return diffs, labels, theta


def mle_gradient_errors(rng: np.random.Generator, n: int = 50) -> np.ndarray:
    out = np.empty(n)
    for i in range(n):
        diffs, labels, theta = _pref_problem(rng)
        weights = rng.uniform(0.5, 2.0, size=len(labels)) if i % 2 else None
        fd = central_difference(lambda t: loglik_arrays(t, diffs, labels, weights), theta.copy(), 1e-5)
        out[i] = _rel(loglik_grad_arrays(theta, diffs, labels, weights), fd)
    return out


def reward_step_gradient_errors(rng: np.random.Generator, n: int = 50) -> np.ndarray:
    out = np.empty(n)
    for i in range(n):
        diffs, labels, theta = _pref_problem(rng)
        data = PrefData(diffs, labels, np.ones(len(labels)), len(labels))
        batch_gap = rng.normal(size=(int(rng.integers(1, 9)), diffs.shape[1]))
        beta = float(rng.uniform(0.0, 2.0))
        fd = central_difference(lambda t: reward_objective(t, batch_gap, data, beta), theta.copy(), 1e-5)
        out[i] = _rel(reward_gradient(theta, batch_gap, data, beta), fd)
    return out


def clipped_gradient_errors(rng: np.random.Generator, n: int = 50, batch: int = 32) -> np.ndarray:
    """Clipped surrogate gradient vs central differences around a perturbed snapshot."""
    out = np.empty(n)
    for i in range(n):
        inst = random_tiny_instance(rng, max_vocab=3, max_horizon=3)
        mdp, snapshot = inst.mdp, inst.student
        policy = snapshot.with_weights(snapshot.W + rng.normal(scale=0.3, size=snapshot.W.shape))
        xs = sample_prompts(mdp, batch, rng)
        acts = sample_actions(mdp, snapshot, xs, rng)
        adv = rng.normal(size=batch)
        eps = float(rng.uniform(0.1, 0.3))

        def f(W: np.ndarray) -> float:
            return clipped_surrogate(mdp, policy.with_weights(W), snapshot, xs, acts, adv, eps)

        fd = central_difference(f, policy.W.copy(), 1e-6)
        out[i] = _rel(clipped_gradient(mdp, policy, snapshot, xs, acts, adv, eps), fd)
    return out
