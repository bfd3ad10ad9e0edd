"""Shared machinery for the reward-vs-student min-max solvers.

Every solver here plays a linear adversary ``theta`` against a softmax
student. The adversary's payoff is ``theta . (offset - E_pi g(tau))`` and
its parameter is tied to the preference data through the BTL likelihood of
per-trajectory features ``h(tau)``:

* reward critic: ``g = h = phi`` and ``offset = phi(d0, teacher)``, so the
  payoff is the value gap ``J(teacher, r) - J(pi, r)``.
* moment critic: ``theta`` parameterizes a teacher Q-function
  ``f = theta . psi_q``. Then ``g`` is the discounted sum of
  ``psi_q(s, a) - E_teacher psi_q(s, .)`` along the student path, the offset
  is zero, and ``h`` is the discounted sum of the induced reward features
  ``psi_q(s_h, a_h) - gamma E_teacher psi_q(s_{h+1}, .)``.

Both critics only need a queryable teacher; the moment critic additionally
needs its action probabilities at student-visited states.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Sequence

import numpy as np

from pbkd.errors import DimensionMismatch, NonFinite
from pbkd.policies import (
    Policy,
    SoftmaxLinearPolicy,
    batch_log_prob,
    exact_objective_gradient,
    score_gradient,
    trajectory_probs,
)
from pbkd.reward_model import compress, maximize_penalized
from pbkd.seq_mdp import TokenMdp, sample_actions, sample_prompts

REWARD = "reward"
MOMENT = "moment"


@dataclass(frozen=True, eq=False)
class Critic:
    mdp: TokenMdp
    teacher: Policy
    kind: str = REWARD
    q_features: TokenMdp | None = None

    def __post_init__(self) -> None:
        if self.kind not in (REWARD, MOMENT):
            raise ValueError(f"unknown critic kind {self.kind!r}")
        q = self.q_features
        if q is not None:
            m = self.mdp
            if (q.vocab_size, q.horizon, q.prompt_count) != (m.vocab_size, m.horizon, m.prompt_count):
                raise DimensionMismatch("Q feature map must share V, H and prompts with the MDP")

    @property
    def psi(self) -> np.ndarray:
        return (self.q_features or self.mdp).psi

    @property
    def dim(self) -> int:
        return self.psi.shape[-1]

    # per-trajectory features --------------------------------------------

    def _step_terms(self, prompts: np.ndarray, actions: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Per-depth ``psi(s_h, a_h)`` and ``E_teacher psi(s_h, .)``."""
        mdp = self.mdp
        source = self.q_features or mdp
        prompts = np.asarray(prompts, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        prefix = np.zeros(len(prompts), dtype=np.int64)
        taken, expected = [], []
        for h in range(mdp.horizon):
            ctx = source.context_index(h, prefix)
            block = self.psi[prompts, ctx, h]  # (n, V, d)
            taken.append(block[np.arange(len(prompts)), actions[:, h]])
            if self.kind == MOMENT:
                probs = self.teacher.probs_at(mdp, prompts, h, prefix)
                expected.append(np.einsum("na,nad->nd", probs, block))
            prefix = prefix * mdp.vocab_size + actions[:, h]
        return taken, expected

    def _both(self, prompts: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        gamma = self.mdp.gamma
        taken, expected = self._step_terms(prompts, actions)
        n = len(prompts)
        g = np.zeros((n, self.dim))
        pref = np.zeros((n, self.dim))
        for h in range(self.mdp.horizon):
            w = gamma**h
            g += w * taken[h]
            pref += w * taken[h]
            if self.kind == MOMENT:
                g -= w * expected[h]
                if h + 1 < self.mdp.horizon:
                    pref -= w * gamma * expected[h + 1]
        return g, pref

    def policy_features(self, prompts: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self._both(prompts, actions)[0]

    def pref_features(self, prompts: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return self._both(prompts, actions)[1]

    def pref_diffs(self, prompts: np.ndarray, actions0: np.ndarray, actions1: np.ndarray) -> np.ndarray:
        return self.pref_features(prompts, actions0) - self.pref_features(prompts, actions1)

    @cached_property
    def _tables(self) -> tuple[np.ndarray, np.ndarray]:
        mdp = self.mdp
        mdp.check_enumerable()
        P, acts = mdp.prompt_count, mdp.all_actions
        xs = np.repeat(np.arange(P), len(acts))
        g, pref = self._both(xs, np.tile(acts, (P, 1)))
        return g.reshape(P, len(acts), -1), pref.reshape(P, len(acts), -1)

    @property
    def policy_table(self) -> np.ndarray:
        return self._tables[0]

    @property
    def pref_table(self) -> np.ndarray:
        return self._tables[1]

    @cached_property
    def exact_offset(self) -> np.ndarray:
        if self.kind == MOMENT:
            return np.zeros(self.dim)
        return self.expected_policy_features(self.teacher)

    def expected_policy_features(self, policy: Policy) -> np.ndarray:
        p = trajectory_probs(self.mdp, policy)
        return np.einsum("x,xi,xid->d", self.mdp.d0, p, self.policy_table)

    def gap_vector_exact(self, policy: Policy) -> np.ndarray:
        """``offset - E_pi g``; the payoff of ``theta`` is ``theta`` dotted with this."""
        return self.exact_offset - self.expected_policy_features(policy)

    def gap_vector_sampled(
        self, teacher_prompts: np.ndarray, teacher_actions: np.ndarray, prompts: np.ndarray, actions: np.ndarray
    ) -> np.ndarray:
        g = self.policy_features(prompts, actions).mean(axis=0)
        if self.kind == MOMENT:
            return -g
        return self.policy_features(teacher_prompts, teacher_actions).mean(axis=0) - g

    def gap_rows(
        self, teacher_prompts: np.ndarray, teacher_actions: np.ndarray, prompts: np.ndarray, actions: np.ndarray
    ) -> np.ndarray:
        """Per-pair payoff gradients whose mean is ``gap_vector_sampled``."""
        g = self.policy_features(prompts, actions)
        if self.kind == MOMENT:
            return -g
        return self.policy_features(teacher_prompts, teacher_actions) - g

    # student gradients ---------------------------------------------------

    def value_gradient_exact(self, policy: SoftmaxLinearPolicy, theta: np.ndarray) -> np.ndarray:
        """Exact gradient of ``E_pi theta . g``."""
        return exact_objective_gradient(self.mdp, policy, self.policy_table @ theta)

    def value_gradient_sampled(
        self,
        policy: SoftmaxLinearPolicy,
        theta: np.ndarray,
        prompts: np.ndarray,
        actions: np.ndarray,
        baseline: bool = True,
    ) -> np.ndarray:
        """Score-function estimate from on-policy samples, optionally with a batch-mean baseline."""
        rewards = self.policy_features(prompts, actions) @ theta
        adv = rewards - rewards.mean() if baseline else rewards
        return score_gradient(self.mdp, policy, prompts, actions, adv / len(rewards))


# ---------------------------------------------------------------------------
# clipped surrogate
# ---------------------------------------------------------------------------


def clip_active(ratio: np.ndarray, adv: np.ndarray, eps: float) -> np.ndarray:
    """True where ``min(ratio*A, clip(ratio)*A)`` follows the unclipped branch."""
    return np.where(adv >= 0, ratio <= 1.0 + eps, ratio >= 1.0 - eps)


def clipped_surrogate(
    mdp: TokenMdp,
    policy: SoftmaxLinearPolicy,
    snapshot: Policy,
    prompts: np.ndarray,
    actions: np.ndarray,
    adv: np.ndarray,
    eps: float,
) -> float:
    ratio = np.exp(batch_log_prob(policy, mdp, prompts, actions) - batch_log_prob(snapshot, mdp, prompts, actions))
    return float(np.mean(np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)))


def clipped_gradient(
    mdp: TokenMdp,
    policy: SoftmaxLinearPolicy,
    snapshot: Policy,
    prompts: np.ndarray,
    actions: np.ndarray,
    adv: np.ndarray,
    eps: float,
) -> np.ndarray:
    """Gradient of the batch-mean clipped surrogate at ``policy``."""
    ratio = np.exp(batch_log_prob(policy, mdp, prompts, actions) - batch_log_prob(snapshot, mdp, prompts, actions))
    w = np.where(clip_active(ratio, adv, eps), adv * ratio, 0.0)
    return score_gradient(mdp, policy, prompts, actions, w / len(adv))


def clipped_gradient_exact(
    critic: Critic,
    policy: SoftmaxLinearPolicy,
    snapshot: Policy,
    theta: np.ndarray,
    eps: float,
    baseline: bool = True,
) -> np.ndarray:
    """Infinite-batch limit of ``clipped_gradient`` with rollouts from ``snapshot``."""
    mdp = critic.mdp
    p_new = trajectory_probs(mdp, policy)
    p_old = trajectory_probs(mdp, snapshot)
    rewards = critic.policy_table @ theta
    if baseline:
        rewards = rewards - np.einsum("xi,xi->x", p_old, rewards)[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(p_old > 0, p_new / p_old, np.inf)
    active = clip_active(ratio, rewards, eps) & (p_old > 0)
    w = np.where(active, mdp.d0[:, None] * p_new * rewards, 0.0)
    P, N = w.shape
    return score_gradient(mdp, policy, np.repeat(np.arange(P), N), np.tile(mdp.all_actions, (P, 1)), w.ravel())


# ---------------------------------------------------------------------------
# adversary
# ---------------------------------------------------------------------------


@dataclass
class PrefData:
    """Compressed preference rows in critic feature space."""

    diffs: np.ndarray
    labels: np.ndarray
    weights: np.ndarray
    n: int

    @classmethod
    def build(cls, critic: Critic, prompts: np.ndarray, actions0: np.ndarray, actions1: np.ndarray, labels: np.ndarray) -> "PrefData":
        diffs, lab, w = compress(critic.pref_diffs(prompts, actions0, actions1), np.asarray(labels, dtype=np.int64))
        return cls(diffs, lab, w, len(labels))

    @classmethod
    def from_dataset(cls, critic: Critic, dataset: Any) -> "PrefData":
        return cls.build(critic, dataset.prompts, dataset.actions0, dataset.actions1, dataset.labels)

    def merged(self, other: "PrefData") -> "PrefData":
        rows = np.concatenate([self.diffs, other.diffs])
        labels = np.concatenate([self.labels, other.labels])
        weights = np.concatenate([self.weights, other.weights])
        if len(labels) == 0:
            return PrefData(rows, labels, weights, 0)
        key = np.concatenate([rows, labels[:, None].astype(float)], axis=1)
        uniq, inv = np.unique(key, axis=0, return_inverse=True)
        w = np.zeros(len(uniq))
        np.add.at(w, inv.ravel(), weights)
        return PrefData(uniq[:, :-1], uniq[:, -1].astype(np.int64), w, self.n + other.n)


@dataclass
class AdversaryState:
    theta: np.ndarray
    step: float | None = None


def adversary_ascent(
    state: AdversaryState,
    gap_vec: np.ndarray,
    data: PrefData,
    beta: float,
    bound: float,
    n_steps: int,
) -> tuple[AdversaryState, list[float]]:
    """``n_steps`` monotone projected-ascent steps on ``theta . gap_vec + beta * loglik``."""
    theta, _, _, history, step = maximize_penalized(
        data.diffs, data.labels, bound, lin=gap_vec, beta=beta, weights=data.weights,
        theta0=state.theta, max_iter=n_steps, grad_tol=0.0, step0=state.step,
    )
    return AdversaryState(theta, step), history


def confidence_worst_case(
    gap_vec: np.ndarray,
    data: PrefData,
    bound: float,
    zeta: float,
    max_loglik: float,
    theta_mle: np.ndarray,
    tol: float = 1e-9,
    bisections: int = 60,
) -> tuple[np.ndarray, float]:
    """Maximize ``theta . gap_vec`` over the ball intersected with the likelihood confidence set.

    Solved through its Lagrangian: the penalized maximizer ``theta(beta)``
    moves from the ball's boundary (beta = 0) to the MLE (beta large) and its
    log-likelihood increases monotonically, so the multiplier that lands on
    the constraint boundary is found by bisection on ``log beta``.
    Returns ``(theta, beta)``.
    """
    from pbkd.reward_model import loglik_arrays

    def solve(beta: float, start: np.ndarray) -> np.ndarray:
        return maximize_penalized(
            data.diffs, data.labels, bound, lin=gap_vec, beta=beta, weights=data.weights,
            theta0=start, max_iter=5000, grad_tol=tol,
        )[0]

    def ll(th: np.ndarray) -> float:
        return loglik_arrays(th, data.diffs, data.labels, data.weights)

    floor = max_loglik - zeta
    norm = float(np.linalg.norm(gap_vec))
    if norm == 0:
        return np.asarray(theta_mle, dtype=float), np.inf
    edge = bound * gap_vec / norm
    if ll(edge) >= floor:
        return edge, 0.0
    lo, hi = -12.0, 8.0
    best = np.asarray(theta_mle, dtype=float)
    best_beta = np.inf
    start = best
    for _ in range(bisections):
        mid = 0.5 * (lo + hi)
        th = solve(10.0**mid, start)
        if ll(th) >= floor:
            best, best_beta, hi = th, 10.0**mid, mid
            start = th
        else:
            lo = mid
        if hi - lo < 1e-6:
            break
    return best, best_beta


# ---------------------------------------------------------------------------
# covariance and traces
# ---------------------------------------------------------------------------


@dataclass
class Covariance:
    matrix: np.ndarray
    ridge: float

    @classmethod
    def ridge_only(cls, d: int, ridge: float) -> "Covariance":
        return cls(ridge * np.eye(d), ridge)

    def updated(self, diffs: np.ndarray) -> "Covariance":
        diffs = np.asarray(diffs, dtype=float)
        if diffs.ndim != 2 or diffs.shape[1] != self.matrix.shape[0]:
            raise DimensionMismatch(f"expected differences of dimension {self.matrix.shape[0]}")
        if len(diffs) == 0:
            return self
        outer = diffs.T @ diffs / len(diffs)
        new = self.matrix + outer
        return Covariance(0.5 * (new + new.T), self.ridge)

    def solve(self, v: np.ndarray) -> np.ndarray:
        return np.linalg.solve(self.matrix, v)

    def logdet(self) -> float:
        return float(np.linalg.slogdet(self.matrix)[1])


@dataclass
class Trace:
    columns: Sequence[str]
    rows: list[tuple] = field(default_factory=list)

    def add(self, **values: Any) -> None:
        row = tuple(values[c] for c in self.columns)
        for c, v in zip(self.columns, row):
            if isinstance(v, float) and not np.isfinite(v):
                raise NonFinite(f"non-finite value in trace column {c!r}")
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        i = list(self.columns).index(name)
        return np.array([r[i] for r in self.rows], dtype=float)

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.columns) + "\n")
        for row in self.rows:
            buf.write(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in row) + "\n")
        return buf.getvalue()


def check_finite_policy(policy: SoftmaxLinearPolicy) -> SoftmaxLinearPolicy:
    if not np.all(np.isfinite(policy.W)):
        raise NonFinite("policy weights became non-finite")
    return policy


def sample_student(mdp: TokenMdp, policy: Policy, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    xs = sample_prompts(mdp, n, rng)
    return xs, sample_actions(mdp, policy, xs, rng)
