"""Student and teacher policies, exact/Monte-Carlo evaluation, DP optimum, baselines.

Two representations:

* ``SoftmaxLinearPolicy`` -- logits ``W[state]`` where the state feature is a
  one-hot over (prompt, position, last-k context). This is the student class.
* ``TabularPolicy`` -- one probability vector per full prefix. Teachers and
  DP optima live here.

Exact quantities enumerate all ``V**H`` trajectories per prompt; the MC
variants only need rollouts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from pbkd.errors import EmptyDataset, MalformedTrajectory, UnknownState
from pbkd.seq_mdp import (
    TokenMdp,
    Trajectory,
    make_trajectory,
    sample_actions,
    sample_prompts,
    validate_actions,
)

POLICY_RECORD_VERSION = 1


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# ---------------------------------------------------------------------------
# representations
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SoftmaxLinearPolicy:
    W: np.ndarray
    temperature: float = 1.0
    context_len: int = 1

    def __post_init__(self) -> None:
        W = np.array(self.W, dtype=float)
        W.setflags(write=False)
        object.__setattr__(self, "W", W)
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @staticmethod
    def n_state_features(mdp: TokenMdp) -> int:
        return mdp.prompt_count * mdp.horizon * mdp.n_contexts

    @classmethod
    def uniform(cls, mdp: TokenMdp, temperature: float = 1.0) -> "SoftmaxLinearPolicy":
        return cls(np.zeros((cls.n_state_features(mdp), mdp.vocab_size)), temperature, mdp.context_len)

    def with_weights(self, W: np.ndarray) -> "SoftmaxLinearPolicy":
        return SoftmaxLinearPolicy(W, self.temperature, self.context_len)

    def state_index(self, mdp: TokenMdp, prompts: np.ndarray, h: int, prefix_idx: np.ndarray) -> np.ndarray:
        if self.context_len != mdp.context_len:
            raise ValueError("policy context length differs from the MDP's")
        ctx = mdp.context_index(h, prefix_idx)
        return (np.asarray(prompts, dtype=np.int64) * mdp.horizon + h) * mdp.n_contexts + ctx

    def logits_at(self, mdp: TokenMdp, prompts: np.ndarray, h: int, prefix_idx: np.ndarray) -> np.ndarray:
        return self.W[self.state_index(mdp, prompts, h, prefix_idx)] / self.temperature

    def probs_at(self, mdp: TokenMdp, prompts: np.ndarray, h: int, prefix_idx: np.ndarray) -> np.ndarray:
        return softmax(self.logits_at(mdp, prompts, h, prefix_idx))

    def to_record(self) -> dict[str, Any]:
        return {
            "version": POLICY_RECORD_VERSION,
            "kind": "softmax_linear",
            "temperature": repr(float(self.temperature)),
            "context_len": self.context_len,
            "shape": list(self.W.shape),
            "W": [repr(float(v)) for v in self.W.ravel()],
        }


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """``tables[h]`` has shape ``(P, V**h, V)``; NaN rows mark states off the support."""

    tables: tuple[np.ndarray, ...] = field(repr=False)

    def __post_init__(self) -> None:
        tabs = []
        for t in self.tables:
            t = np.array(t, dtype=float)
            t.setflags(write=False)
            tabs.append(t)
        object.__setattr__(self, "tables", tuple(tabs))

    @classmethod
    def from_mapping(cls, mdp: TokenMdp, mapping: dict[tuple[int, tuple[int, ...]], Sequence[float]]) -> "TabularPolicy":
        V = mdp.vocab_size
        tabs = [np.full((mdp.prompt_count, V**h, V), np.nan) for h in range(mdp.horizon)]
        for (x, prefix), probs in mapping.items():
            code = 0
            for a in prefix:
                code = code * V + int(a)
            tabs[len(prefix)][x, code] = np.asarray(probs, dtype=float)
        return cls(tuple(tabs))

    def probs_at(self, mdp: TokenMdp, prompts: np.ndarray, h: int, prefix_idx: np.ndarray) -> np.ndarray:
        out = self.tables[h][np.asarray(prompts, dtype=np.int64), np.asarray(prefix_idx, dtype=np.int64)]
        if np.isnan(out).any():
            raise UnknownState(f"tabular policy undefined at depth {h}")
        return out

    def is_deterministic(self) -> bool:
        return all(np.all((t == 0.0) | (t == 1.0)) for t in self.tables)

    def to_record(self) -> dict[str, Any]:
        return {
            "version": POLICY_RECORD_VERSION,
            "kind": "tabular",
            "tables": [
                {"shape": list(t.shape), "values": [repr(float(v)) for v in t.ravel()]} for t in self.tables
            ],
        }


Policy = SoftmaxLinearPolicy | TabularPolicy


def policy_from_record(rec: dict[str, Any]) -> Policy:
    if rec.get("version") != POLICY_RECORD_VERSION:
        raise ValueError(f"unsupported policy record version {rec.get('version')}")
    if rec["kind"] == "softmax_linear":
        W = np.array([float(v) for v in rec["W"]]).reshape(rec["shape"])
        return SoftmaxLinearPolicy(W, float(rec["temperature"]), int(rec["context_len"]))
    if rec["kind"] == "tabular":
        return TabularPolicy(
            tuple(np.array([float(v) for v in t["values"]]).reshape(t["shape"]) for t in rec["tables"])
        )
    raise ValueError(f"unknown policy kind {rec['kind']!r}")


def dumps_policy(policy: Policy) -> str:
    return json.dumps(policy.to_record())


def loads_policy(text: str) -> Policy:
    return policy_from_record(json.loads(text))


# ---------------------------------------------------------------------------
# queries
# ---------------------------------------------------------------------------


def _prefix_code(mdp: TokenMdp, prefix: Sequence[int]) -> int:
    code = 0
    for a in prefix:
        code = code * mdp.vocab_size + int(a)
    return code


def action_distribution(policy: Policy, mdp: TokenMdp, prompt: int, state: Sequence[int]) -> np.ndarray:
    if len(state) >= mdp.horizon or any(not 0 <= int(a) < mdp.vocab_size for a in state):
        raise UnknownState(f"state {tuple(state)} is not a non-terminal prefix")
    probs = policy.probs_at(mdp, np.array([prompt]), len(state), np.array([_prefix_code(mdp, state)]))
    return probs[0]


def log_prob(policy: Policy, mdp: TokenMdp, traj: Trajectory) -> float:
    acts = validate_actions(mdp, traj.prompt, traj.actions)
    return float(batch_log_prob(policy, mdp, np.array([traj.prompt]), np.array([acts]))[0])


def batch_log_prob(policy: Policy, mdp: TokenMdp, prompts: np.ndarray, actions: np.ndarray) -> np.ndarray:
    prompts = np.asarray(prompts, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    n = actions.shape[0]
    out = np.zeros(n)
    prefix = np.zeros(n, dtype=np.int64)
    rows = np.arange(n)
    with np.errstate(divide="ignore"):
        for h in range(mdp.horizon):
            p = policy.probs_at(mdp, prompts, h, prefix)[rows, actions[:, h]]
            out += np.log(p)
            prefix = prefix * mdp.vocab_size + actions[:, h]
    return out


def trajectory_probs(mdp: TokenMdp, policy: Policy) -> np.ndarray:
    """Probability of every enumerated trajectory, shape ``(P, V**H)``."""
    mdp.check_enumerable()
    P, V, H = mdp.prompt_count, mdp.vocab_size, mdp.horizon
    acts = mdp.all_actions
    codes = mdp.prefix_codes
    out = np.ones((P, acts.shape[0]))
    for h in range(H):
        prefixes = np.arange(V**h, dtype=np.int64)
        xs = np.repeat(np.arange(P), V**h)
        probs = policy.probs_at(mdp, xs, h, np.tile(prefixes, P)).reshape(P, V**h, V)
        out = out * probs[:, codes[:, h], acts[:, h]]
    return out


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _theta(reward: Any) -> np.ndarray:
    return np.asarray(getattr(reward, "theta", reward), dtype=float)


def feature_expectation(
    mdp: TokenMdp,
    policy: Policy,
    mode: str = "exact",
    n_samples: int = 0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """E over prompts and trajectories of phi(x, tau)."""
    if mode == "exact":
        p = trajectory_probs(mdp, policy)
        return np.einsum("x,xi,xid->d", mdp.d0, p, mdp.feature_matrix)
    if mode == "mc":
        if rng is None or n_samples < 1:
            raise ValueError("mc mode needs n_samples >= 1 and a generator")
        xs = sample_prompts(mdp, n_samples, rng)
        acts = sample_actions(mdp, policy, xs, rng)
        return mdp.batch_features(xs, acts).mean(axis=0)
    raise ValueError(f"unknown mode {mode!r}")


def exact_value(mdp: TokenMdp, policy: Policy, reward: Any) -> float:
    """J(pi, r) by full enumeration."""
    p = trajectory_probs(mdp, policy)
    values = mdp.feature_matrix @ _theta(reward)
    return float(np.einsum("x,xi,xi->", mdp.d0, p, values))


@dataclass(frozen=True)
class McEstimate:
    value: float
    stderr: float
    n: int


def mc_value(mdp: TokenMdp, policy: Policy, reward: Any, n_samples: int, rng: np.random.Generator) -> McEstimate:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    xs = sample_prompts(mdp, n_samples, rng)
    acts = sample_actions(mdp, policy, xs, rng)
    vals = mdp.batch_features(xs, acts) @ _theta(reward)
    se = float(vals.std(ddof=1) / np.sqrt(n_samples)) if n_samples > 1 else 0.0
    return McEstimate(float(vals.mean()), se, n_samples)


# ---------------------------------------------------------------------------
# dynamic programming
# ---------------------------------------------------------------------------


def step_reward_tables(mdp: TokenMdp, theta: np.ndarray) -> list[np.ndarray]:
    """Undiscounted step reward ``theta . psi`` per depth, shapes ``(P, V**h, V)``."""
    P, V = mdp.prompt_count, mdp.vocab_size
    out = []
    for h in range(mdp.horizon):
        ctx = mdp.context_index(h, np.arange(V**h, dtype=np.int64))
        out.append(mdp.psi[:, ctx, h, :, :] @ theta)
    return out


def optimal_q_tables(mdp: TokenMdp, reward: Any) -> list[np.ndarray]:
    """Q*_h with absolute discounting: ``gamma**h r_h + V*_{h+1}``."""
    mdp.check_enumerable()
    theta = _theta(reward)
    V = mdp.vocab_size
    rewards = step_reward_tables(mdp, theta)
    q: list[np.ndarray] = [None] * mdp.horizon  # type: ignore[list-item]
    cont = np.zeros((mdp.prompt_count, V**mdp.horizon))
    for h in reversed(range(mdp.horizon)):
        cont_next = cont.reshape(mdp.prompt_count, V**h, V)
        q[h] = (mdp.gamma**h) * rewards[h] + cont_next
        cont = q[h].max(axis=2)
    return q


def dp_optimal_policy(mdp: TokenMdp, reward: Any) -> TabularPolicy:
    """Deterministic optimum by backward induction; ties go to the smallest action."""
    q = optimal_q_tables(mdp, reward)
    V = mdp.vocab_size
    tabs = []
    for qh in q:
        best = qh.argmax(axis=2)
        tabs.append(np.eye(V)[best])
    return TabularPolicy(tuple(tabs))


def teacher_policy(mdp: TokenMdp, reward: Any, temperature: float | None = None) -> TabularPolicy:
    """DP optimum, or a softmax over the optimal Q-values when ``temperature`` is set."""
    if temperature is None or temperature == 0:
        return dp_optimal_policy(mdp, reward)
    q = optimal_q_tables(mdp, reward)
    return TabularPolicy(tuple(softmax(qh / temperature, axis=2) for qh in q))


# ---------------------------------------------------------------------------
# gradients of softmax-linear policies
# ---------------------------------------------------------------------------


def score_gradient(
    mdp: TokenMdp,
    policy: SoftmaxLinearPolicy,
    prompts: np.ndarray,
    actions: np.ndarray,
    weights: np.ndarray,
) -> np.ndarray:
    """``sum_n weights[n] * grad_W log pi(tau_n)``."""
    prompts = np.asarray(prompts, dtype=np.int64)
    actions = np.asarray(actions, dtype=np.int64)
    weights = np.asarray(weights, dtype=float)
    n = actions.shape[0]
    grad = np.zeros_like(policy.W)
    prefix = np.zeros(n, dtype=np.int64)
    rows = np.arange(n)
    for h in range(mdp.horizon):
        s = policy.state_index(mdp, prompts, h, prefix)
        contrib = -softmax(policy.W[s] / policy.temperature)
        contrib[rows, actions[:, h]] += 1.0
        np.add.at(grad, s, weights[:, None] * contrib)
        prefix = prefix * mdp.vocab_size + actions[:, h]
    return grad / policy.temperature


def exact_objective_gradient(mdp: TokenMdp, policy: SoftmaxLinearPolicy, traj_values: np.ndarray) -> np.ndarray:
    """Gradient of ``sum_x d0(x) sum_tau p(tau) traj_values[x, tau]`` by enumeration."""
    p = trajectory_probs(mdp, policy)
    P, N = p.shape
    w = (mdp.d0[:, None] * p * traj_values).ravel()
    xs = np.repeat(np.arange(P), N)
    acts = np.tile(mdp.all_actions, (P, 1))
    return score_gradient(mdp, policy, xs, acts, w)


def value_gradient(mdp: TokenMdp, policy: SoftmaxLinearPolicy, reward: Any) -> np.ndarray:
    return exact_objective_gradient(mdp, policy, mdp.feature_matrix @ _theta(reward))


# ---------------------------------------------------------------------------
# baselines
# ---------------------------------------------------------------------------


@dataclass
class BCOptions:
    epochs: int = 300
    lr: float = 1.0
    l2: float = 0.0
    grad_tol: float = 1e-8
    max_backtracks: int = 30


@dataclass
class BCResult:
    policy: SoftmaxLinearPolicy
    losses: list[float]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


def _dedupe(prompts: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = np.concatenate([prompts[:, None], actions], axis=1)
    uniq, counts = np.unique(rows, axis=0, return_counts=True)
    return uniq[:, 0], uniq[:, 1:], counts.astype(float)


def behavior_cloning_fit(
    mdp: TokenMdp,
    teacher_trajectories: Sequence[Trajectory] | tuple[np.ndarray, np.ndarray],
    policy_init: SoftmaxLinearPolicy,
    opts: BCOptions | None = None,
) -> BCResult:
    """Maximum-likelihood fit of the student on teacher trajectories.

    Full-batch gradient ascent on the mean log-likelihood with Armijo
    backtracking, so the reported loss never increases.
    """
    opts = opts or BCOptions()
    if isinstance(teacher_trajectories, tuple):
        prompts, actions = (np.asarray(a, dtype=np.int64) for a in teacher_trajectories)
    else:
        if len(teacher_trajectories) == 0:
            raise EmptyDataset("behavior cloning needs at least one trajectory")
        prompts = np.array([t.prompt for t in teacher_trajectories], dtype=np.int64)
        actions = np.array([validate_actions(mdp, t.prompt, t.actions) for t in teacher_trajectories])
    if actions.shape[0] == 0:
        raise EmptyDataset("behavior cloning needs at least one trajectory")
    if actions.ndim != 2 or actions.shape[1] != mdp.horizon:
        raise MalformedTrajectory("teacher actions must have shape (n, H)")
    xs, acts, counts = _dedupe(prompts, actions)
    weights = counts / counts.sum()

    def objective(pol: SoftmaxLinearPolicy) -> float:
        return float(weights @ batch_log_prob(pol, mdp, xs, acts)) - 0.5 * opts.l2 * float(np.sum(pol.W**2))

    pol = policy_init
    obj = objective(pol)
    losses = [-obj]
    step = opts.lr
    for _ in range(opts.epochs):
        grad = score_gradient(mdp, pol, xs, acts, weights) - opts.l2 * pol.W
        gnorm2 = float(np.sum(grad**2))
        if np.sqrt(gnorm2) <= opts.grad_tol:
            losses.append(-obj)
            continue
        for _ in range(opts.max_backtracks):
            cand = pol.with_weights(pol.W + step * grad)
            cand_obj = objective(cand)
            if cand_obj >= obj + 0.5 * step * gnorm2:
                break
            step *= 0.5
        else:
            losses.append(-obj)
            continue
        pol, obj = cand, cand_obj
        losses.append(-obj)
        step = min(step * 2.0, opts.lr * 64)
    return BCResult(pol, losses)


def best_of_n(
    mdp: TokenMdp,
    policy: Policy,
    reward_model: Any,
    prompt: int,
    n: int,
    rng: np.random.Generator,
) -> Trajectory:
    """Sample ``n`` rollouts and keep the highest-reward one (earliest wins ties)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    acts = sample_actions(mdp, policy, np.full(n, prompt), rng)
    scores = mdp.batch_features(np.full(n, prompt), acts) @ _theta(reward_model)
    return make_trajectory(mdp, prompt, acts[int(np.argmax(scores))])
