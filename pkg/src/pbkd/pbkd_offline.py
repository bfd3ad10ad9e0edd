"""Offline preference-based distillation: a Lagrangian min-max over a fixed dataset.

The adversary picks a reward that makes the student look worst relative to
the teacher while staying likely under the preference data; the student then
climbs that reward. With ``beta_mode="calibrated"`` the multiplier is re-chosen
every round so the adversary sits on the boundary of the ``zeta``
log-likelihood confidence set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pbkd.adversarial import (
    AdversaryState,
    Critic,
    PrefData,
    Trace,
    adversary_ascent,
    check_finite_policy,
    confidence_worst_case,
    sample_student,
)
from pbkd.errors import EmptyDataset
from pbkd.policies import Policy, SoftmaxLinearPolicy, exact_value, feature_expectation
from pbkd.preference_data import PreferenceDataset
from pbkd.reward_model import loglik_arrays, maximize_penalized, offline_zeta
from pbkd.seq_mdp import TokenMdp


@dataclass
class OfflineConfig:
    beta: float = 1.0
    reward_steps: int = 25
    policy_steps: int = 5
    rounds: int = 200
    reward_lr: float | None = None
    policy_lr: float = 1.0
    value_mode: str = "exact"
    n_samples: int = 256
    bound: float = 2.0
    baseline: bool = True
    beta_mode: str = "fixed"
    zeta_c: float = 1.0
    output: str = "last"

    def __post_init__(self) -> None:
        if min(self.reward_steps, self.policy_steps, self.rounds, self.n_samples) < 1:
            raise ValueError("step, round and sample counts must be >= 1")
        if self.policy_lr <= 0 or (self.reward_lr is not None and self.reward_lr <= 0):
            raise ValueError("learning rates must be positive")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.value_mode not in ("exact", "mc"):
            raise ValueError(f"unknown value mode {self.value_mode!r}")
        if self.beta_mode not in ("fixed", "calibrated"):
            raise ValueError(f"unknown beta mode {self.beta_mode!r}")
        if self.output not in ("last", "best"):
            raise ValueError(f"unknown output {self.output!r}")
        if self.output == "best" and self.beta_mode != "calibrated":
            raise ValueError("output='best' needs beta_mode='calibrated', where the adversary value is the worst case")


@dataclass
class SolverResult:
    policy: SoftmaxLinearPolicy
    trace: Trace
    theta: np.ndarray

    def __iter__(self):
        return iter((self.policy, self.trace))


def gap(mdp: TokenMdp, teacher: Policy, student: Policy, rm) -> float:
    """``J(teacher, r) - J(student, r)`` for a linear reward, via feature expectations."""
    theta = np.asarray(getattr(rm, "theta", rm), dtype=float)
    return float(theta @ (feature_expectation(mdp, teacher) - feature_expectation(mdp, student)))


def offline_columns(with_oracle: bool) -> list[str]:
    cols = ["round", "gap", "loglik", "theta_norm", "beta"]
    return cols + ["J_student_rstar"] if with_oracle else cols


def run_adversarial_rounds(
    critic: Critic,
    data: PrefData,
    config: OfflineConfig,
    student_init: SoftmaxLinearPolicy,
    rstar=None,
    rng: np.random.Generator | None = None,
) -> SolverResult:
    """Alternate adversary ascent and student policy-gradient steps for ``config.rounds`` rounds.

    With ``output="best"`` the returned policy is the round's starting policy
    with the smallest worst-case gap. The worst case is a norm-like function
    of the student's features, so plain gradient steps hover around its
    minimum instead of settling.
    """
    if data.n == 0:
        raise EmptyDataset("offline solver needs a non-empty preference dataset")
    mdp = critic.mdp
    mc = config.value_mode == "mc"
    if mc and rng is None:
        raise ValueError("mc value mode needs a generator")
    policy = student_init
    adv = AdversaryState(np.zeros(critic.dim), config.reward_lr)
    calibrated = config.beta_mode == "calibrated"
    if calibrated:
        theta_mle, max_ll, *_ = maximize_penalized(data.diffs, data.labels, config.bound, weights=data.weights)
        zeta = offline_zeta(critic.dim, config.bound, data.n, config.zeta_c)
    trace = Trace(offline_columns(rstar is not None))
    best_policy, best_gap, best_theta = policy, np.inf, adv.theta
    for r in range(config.rounds):
        if mc:
            tx, ta = sample_student(mdp, critic.teacher, config.n_samples, rng)
            sx, sa = sample_student(mdp, policy, config.n_samples, rng)
            gap_vec = critic.gap_vector_sampled(tx, ta, sx, sa)
        else:
            gap_vec = critic.gap_vector_exact(policy)
        if calibrated:
            theta, beta = confidence_worst_case(gap_vec, data, config.bound, zeta, max_ll, theta_mle)
            adv = AdversaryState(theta, adv.step)
        else:
            beta = config.beta
            adv, _ = adversary_ascent(adv, gap_vec, data, beta, config.bound, config.reward_steps)
        theta = adv.theta
        row_gap = float(theta @ gap_vec)
        if row_gap < best_gap:
            best_policy, best_gap, best_theta = policy, row_gap, theta
        for _ in range(config.policy_steps):
            if mc:
                sx, sa = sample_student(mdp, policy, config.n_samples, rng)
                grad = critic.value_gradient_sampled(policy, theta, sx, sa, config.baseline)
            else:
                grad = critic.value_gradient_exact(policy, theta)
            policy = check_finite_policy(policy.with_weights(policy.W + config.policy_lr * grad))
        row = dict(
            round=r,
            gap=row_gap,
            loglik=loglik_arrays(theta, data.diffs, data.labels, data.weights),
            theta_norm=float(np.linalg.norm(theta)),
            beta=float(beta) if np.isfinite(beta) else -1.0,
        )
        if rstar is not None:
            row["J_student_rstar"] = exact_value(mdp, policy, rstar)
        trace.add(**row)
    if config.output == "best":
        return SolverResult(best_policy, trace, best_theta)
    return SolverResult(policy, trace, adv.theta)


def solve_offline(
    mdp: TokenMdp,
    teacher: Policy,
    dataset: PreferenceDataset,
    config: OfflineConfig,
    student_init: SoftmaxLinearPolicy | None = None,
    rstar=None,
    rng: np.random.Generator | None = None,
) -> SolverResult:
    if len(dataset) == 0:
        raise EmptyDataset("offline solver needs a non-empty preference dataset")
    critic = Critic(mdp, teacher)
    data = PrefData.from_dataset(critic, dataset)
    init = student_init if student_init is not None else SoftmaxLinearPolicy.uniform(mdp)
    return run_adversarial_rounds(critic, data, config, init, rstar, rng)
