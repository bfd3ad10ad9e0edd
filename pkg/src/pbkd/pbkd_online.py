"""Online preference-based distillation with clipped policy updates and an uncertainty bonus.

Each iteration compares fresh teacher and student rollouts, adds the labeled
pairs to a cumulative dataset, then runs reward ascent steps, clipped student
steps and one optimistic deviation step, and finally folds the new
comparisons into the feature covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pbkd.adversarial import (
    Covariance,
    Critic,
    PrefData,
    Trace,
    check_finite_policy,
    clipped_gradient,
    clipped_gradient_exact,
    sample_student,
)
from pbkd.errors import NonFinite
from pbkd.policies import Policy, SoftmaxLinearPolicy, dp_optimal_policy, exact_value
from pbkd.preference_data import PreferenceDataset, concat, gen_online_batch
from pbkd.reward_model import loglik_arrays, loglik_grad_arrays, project_ball
from pbkd.seq_mdp import TokenMdp

ONLINE_COLUMNS = [
    "t", "N_t", "J_student_rstar", "J_teacher_rstar", "gap_estimate", "loglik",
    "theta_norm", "sigma_logdet", "regret_cumulative",
]


@dataclass
class OnlineConfig:
    iterations: int = 200
    n_pref: int = 16
    batch: int = 64
    beta: float = 1.0
    clip_eps: float = 0.2
    alpha: float = 0.1
    reward_lr: float = 0.05
    policy_lr: float = 1.0
    reward_steps: int = 1
    policy_steps: int = 1
    labeling: str = "forced"
    ridge: float = 1e-2
    bound: float = 2.0
    estimator: str = "exact"
    baseline: bool = True
    snapshot_every: int = 1

    def __post_init__(self) -> None:
        if self.iterations < 1 or self.n_pref < 1 or self.batch < 1:
            raise ValueError("iterations, n_pref and batch must be >= 1")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.reward_lr <= 0 or self.policy_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.labeling not in ("forced", "oracle"):
            raise ValueError(f"unknown labeling {self.labeling!r}")
        if self.estimator not in ("exact", "mc"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if min(self.reward_steps, self.policy_steps, self.snapshot_every) < 1:
            raise ValueError("step counts must be >= 1")


@dataclass
class OnlineState:
    t: int
    dataset: PreferenceDataset
    data: PrefData
    theta: np.ndarray
    policy: SoftmaxLinearPolicy
    cov: Covariance
    snapshots: list[SoftmaxLinearPolicy] = field(default_factory=list)


@dataclass
class OnlineResult:
    policies: list[SoftmaxLinearPolicy]
    trace: Trace
    theta: np.ndarray
    dataset: PreferenceDataset

    @property
    def policy(self) -> SoftmaxLinearPolicy:
        return self.policies[-1]

    def __iter__(self):
        return iter((self.policies, self.trace))


# ---------------------------------------------------------------------------
# single steps
# ---------------------------------------------------------------------------


def reward_objective(theta: np.ndarray, batch_gap: np.ndarray, data: PrefData, beta: float) -> float:
    """``sum_m [theta . gap_m + beta * loglik(theta; D)]``."""
    ll = loglik_arrays(theta, data.diffs, data.labels, data.weights) if data.n else 0.0
    return float(np.sum(batch_gap @ theta) + len(batch_gap) * beta * ll)


def reward_gradient(theta: np.ndarray, batch_gap: np.ndarray, data: PrefData, beta: float) -> np.ndarray:
    g = batch_gap.sum(axis=0)
    if data.n and beta:
        g = g + len(batch_gap) * beta * loglik_grad_arrays(theta, data.diffs, data.labels, data.weights)
    return g


def reward_lr_cap(data: PrefData, beta: float, m: int) -> float:
    """Inverse of an upper bound on the objective's curvature (inf when it is linear)."""
    curv = 0.25 * m * beta * float(data.weights @ np.sum(data.diffs**2, axis=1)) if data.n else 0.0
    return 1.0 / curv if curv > 0 else np.inf


def reward_step(
    theta: np.ndarray,
    batch_gap: np.ndarray,
    data: PrefData,
    beta: float,
    lr: float,
    bound: float,
    cap: bool = True,
) -> tuple[np.ndarray, float, float]:
    """One projected ascent step; returns ``(theta, objective_before, objective_after)``.

    ``batch_gap`` holds one payoff-gradient row per optimization pair. With
    ``cap`` the step is limited by the curvature bound, which keeps the
    likelihood term from overshooting once the dataset is large.
    """
    batch_gap = np.atleast_2d(batch_gap)
    if len(batch_gap) == 0:
        raise ValueError("reward step needs a non-empty batch")
    step = min(lr, reward_lr_cap(data, beta, len(batch_gap))) if cap else lr
    before = reward_objective(theta, batch_gap, data, beta)
    new = project_ball(theta + step * reward_gradient(theta, batch_gap, data, beta), bound)
    if not np.all(np.isfinite(new)):
        raise NonFinite("reward step produced non-finite parameters")
    return new, before, reward_objective(new, batch_gap, data, beta)


def policy_clipped_step(
    critic: Critic,
    policy: SoftmaxLinearPolicy,
    snapshot: Policy,
    theta: np.ndarray,
    eps: float,
    lr: float,
    baseline: bool = True,
    batch: tuple[np.ndarray, np.ndarray] | None = None,
) -> SoftmaxLinearPolicy:
    """Ascent on the clipped surrogate; ``batch=None`` uses the exact expectation."""
    if batch is None:
        grad = clipped_gradient_exact(critic, policy, snapshot, theta, eps, baseline)
    else:
        xs, acts = batch
        rewards = critic.policy_features(xs, acts) @ theta
        adv = rewards - rewards.mean() if baseline else rewards
        grad = clipped_gradient(critic.mdp, policy, snapshot, xs, acts, adv, eps)
    return check_finite_policy(policy.with_weights(policy.W + lr * grad))


def deviation_objective(critic: Critic, policy: Policy, cov: Covariance) -> float:
    u = critic.gap_vector_exact(policy)
    return float(u @ cov.solve(u))


def uncertainty_gradient(
    critic: Critic,
    policy: SoftmaxLinearPolicy,
    cov: Covariance,
    batch: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Gradient of ``|offset - E_pi g|^2`` in the inverse-covariance norm.

    Each coordinate of ``g`` is treated as a reward, so the gradient is a
    policy gradient for the reward vector ``-2 cov^-1 (offset - E_pi g)``.
    """
    if batch is None:
        u = critic.gap_vector_exact(policy)
        return critic.value_gradient_exact(policy, -2.0 * cov.solve(u))
    tx, ta, sx, sa = batch
    u = critic.gap_vector_sampled(tx, ta, sx, sa)
    return critic.value_gradient_sampled(policy, -2.0 * cov.solve(u), sx, sa)


def uncertainty_step(
    critic: Critic,
    policy: SoftmaxLinearPolicy,
    cov: Covariance,
    alpha: float,
    lr: float,
    batch: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray] | None = None,
) -> SoftmaxLinearPolicy:
    if alpha == 0:
        return policy
    grad = uncertainty_gradient(critic, policy, cov, batch)
    return check_finite_policy(policy.with_weights(policy.W + alpha * lr * grad))


def covariance_update(cov: Covariance, diffs: np.ndarray) -> Covariance:
    return cov.updated(diffs)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


def run_iterations(
    critic: Critic,
    student_init: SoftmaxLinearPolicy,
    config: OnlineConfig,
    rng: np.random.Generator,
    rstar=None,
    initial_dataset: PreferenceDataset | None = None,
    theta_init: np.ndarray | None = None,
) -> OnlineResult:
    mdp, teacher = critic.mdp, critic.teacher
    exact = config.estimator == "exact"
    H = mdp.horizon
    dataset = initial_dataset if initial_dataset is not None else PreferenceDataset.empty(H)
    data = PrefData.from_dataset(critic, dataset) if len(dataset) else PrefData(
        np.zeros((0, critic.dim)), np.zeros(0, dtype=np.int64), np.zeros(0), 0
    )
    theta = np.zeros(critic.dim) if theta_init is None else np.asarray(theta_init, dtype=float)
    policy = student_init
    cov = Covariance.ridge_only(critic.dim, config.ridge)
    if rstar is not None:
        j_star = exact_value(mdp, dp_optimal_policy(mdp, rstar), rstar)
        j_teacher = exact_value(mdp, teacher, rstar)
    trace = Trace(ONLINE_COLUMNS if rstar is not None else [c for c in ONLINE_COLUMNS if "rstar" not in c and c != "regret_cumulative"])
    policies: list[SoftmaxLinearPolicy] = []
    cumulative = 0.0
    for t in range(1, config.iterations + 1):
        snapshot = policy
        new = gen_online_batch(mdp, teacher, snapshot, t, config.n_pref, config.labeling, rstar, rng)
        dataset = concat(dataset, new)
        new_diffs = critic.pref_diffs(new.prompts, new.actions0, new.actions1)
        data = data.merged(PrefData.build(critic, new.prompts, new.actions0, new.actions1, new.labels))

        if exact:
            gap_vec = critic.gap_vector_exact(snapshot)
            batch_gap = np.tile(gap_vec, (config.batch, 1))
            opt_batch = None
            dev_batch = None
        else:
            tx, ta = sample_student(mdp, teacher, config.batch, rng)
            sx, sa = sample_student(mdp, snapshot, config.batch, rng)
            batch_gap = critic.gap_rows(tx, ta, sx, sa)
            gap_vec = batch_gap.mean(axis=0)
            opt_batch = (sx, sa)
            dev_batch = (tx, ta, sx, sa)
        for _ in range(config.reward_steps):
            theta, _, _ = reward_step(theta, batch_gap, data, config.beta, config.reward_lr, config.bound)
        for _ in range(config.policy_steps):
            policy = policy_clipped_step(
                critic, policy, snapshot, theta, config.clip_eps, config.policy_lr, config.baseline, opt_batch
            )
        if config.alpha > 0:
            if dev_batch is not None:
                sx, sa = sample_student(mdp, policy, config.batch, rng)
                dev_batch = (dev_batch[0], dev_batch[1], sx, sa)
            policy = uncertainty_step(critic, policy, cov, config.alpha, config.policy_lr, dev_batch)
        cov = covariance_update(cov, new_diffs)
        policies.append(policy)

        row = dict(
            t=t,
            N_t=len(dataset),
            gap_estimate=float(theta @ gap_vec),
            loglik=loglik_arrays(theta, data.diffs, data.labels, data.weights),
            theta_norm=float(np.linalg.norm(theta)),
            sigma_logdet=cov.logdet(),
        )
        if rstar is not None:
            j = exact_value(mdp, policy, rstar)
            cumulative += j_star - j
            row.update(J_student_rstar=j, J_teacher_rstar=j_teacher, regret_cumulative=cumulative)
        trace.add(**row)
    return OnlineResult(policies, trace, theta, dataset)


def run_online(
    mdp: TokenMdp,
    teacher: Policy,
    student_init: SoftmaxLinearPolicy,
    config: OnlineConfig,
    rng: np.random.Generator,
    rstar=None,
    initial_dataset: PreferenceDataset | None = None,
    theta_init: np.ndarray | None = None,
) -> OnlineResult:
    return run_iterations(Critic(mdp, teacher), student_init, config, rng, rstar, initial_dataset, theta_init)
