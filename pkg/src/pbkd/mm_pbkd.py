"""Moment-matching distillation through teacher Q-functions.

The adversary here is a Q-function ``f`` for the teacher rather than a reward.
Its induced reward ``f(s, a) - gamma * E_teacher f(s', .)`` is what the
preference data must explain, and the student is scored by the
performance-difference form of the value gap, which only needs the teacher's
action probabilities at states the student visits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from pbkd.adversarial import MOMENT, Critic, PrefData, Trace
from pbkd.errors import EmptyDataset, UnknownState
from pbkd.pbkd_offline import OfflineConfig, SolverResult, run_adversarial_rounds
from pbkd.pbkd_online import OnlineConfig, OnlineResult, run_iterations
from pbkd.policies import Policy, SoftmaxLinearPolicy, step_reward_tables
from pbkd.preference_data import PreferenceDataset
from pbkd.seq_mdp import TokenMdp, sample_actions, sample_prompts


@dataclass(frozen=True, eq=False)
class LinearQ:
    w: np.ndarray
    bound: float
    features: TokenMdp | None = None

    def __post_init__(self) -> None:
        w = np.array(self.w, dtype=float).ravel()
        if np.linalg.norm(w) > self.bound + 1e-12:
            raise ValueError(f"|w| = {np.linalg.norm(w):.6g} exceeds bound {self.bound}")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)

    def tables(self, mdp: TokenMdp) -> list[np.ndarray]:
        """``f`` at every prefix, one ``(P, V**h, V)`` array per depth."""
        return step_reward_tables(self.features or mdp, self.w)


QTables = Sequence[np.ndarray]


def successor_features(mdp: TokenMdp, teacher: Policy) -> TokenMdp:
    """Q feature map whose linear functions are exactly the teacher Q-functions of linear rewards.

    ``Psi_h(s, a) = psi(s, a) + gamma * E_teacher Psi_{h+1}(s', .)``, stored over
    full prefixes and scaled by ``1 / H`` to keep step features in the unit
    budget, so ``f_w = Q^teacher_r`` for the reward ``theta = w / H`` and a
    ball of radius ``H * B`` covers every reward of norm ``B``.
    """
    mdp.check_enumerable()
    P, V, H, d = mdp.prompt_count, mdp.vocab_size, mdp.horizon, mdp.feature_dim
    full = TokenMdp(V, H, prompt_count=P, feature_dim=1, context_len=H, prompt_distribution=mdp.prompt_distribution)
    blocks = []
    for h in range(H):
        prefixes = np.arange(V**h)
        blocks.append(mdp.psi[:, mdp.context_index(h, prefixes), h])  # (P, V**h, V, d)
    succ: list[np.ndarray] = [None] * H  # type: ignore[list-item]
    for h in reversed(range(H)):
        succ[h] = blocks[h].copy()
        if h + 1 < H:
            probs = teacher_probs_at_depth(mdp, teacher, h + 1)
            cont = np.einsum("xsa,xsad->xsd", probs, succ[h + 1]).reshape(P, V**h, V, d)
            succ[h] += mdp.gamma * cont
    table = np.zeros(full.table_shape[:-1] + (d,))
    for h in range(H):
        table[:, full.context_index(h, np.arange(V**h)), h] = succ[h] / H
    return TokenMdp(
        V, H, prompt_count=P, feature_dim=d, gamma=mdp.gamma, context_len=H,
        prompt_distribution=mdp.prompt_distribution, feature_table=table,
    )


def _teacher_tables(mdp: TokenMdp, teacher: Policy) -> list[np.ndarray]:
    P, V = mdp.prompt_count, mdp.vocab_size
    out = []
    for h in range(mdp.horizon):
        n = V**h
        xs = np.repeat(np.arange(P), n)
        out.append(teacher.probs_at(mdp, xs, h, np.tile(np.arange(n), P)).reshape(P, n, V))
    return out


def _as_tables(f: LinearQ | QTables, mdp: TokenMdp) -> list[np.ndarray]:
    return f.tables(mdp) if isinstance(f, LinearQ) else [np.asarray(t, dtype=float) for t in f]


def q_teacher_exact(mdp: TokenMdp, teacher: Policy, rm) -> list[np.ndarray]:
    """Teacher Q-values ``Q_h(s, a) = r(s, a) + gamma * E_teacher Q_{h+1}(s', .)`` by backward induction."""
    mdp.check_enumerable()
    theta = np.asarray(getattr(rm, "theta", rm), dtype=float)
    rewards = step_reward_tables(mdp, theta)
    pi = _teacher_tables(mdp, teacher)
    P, V = mdp.prompt_count, mdp.vocab_size
    q: list[np.ndarray] = [None] * mdp.horizon  # type: ignore[list-item]
    for h in reversed(range(mdp.horizon)):
        if h == mdp.horizon - 1:
            q[h] = rewards[h].copy()
        else:
            cont = np.einsum("xsa,xsa->xs", pi[h + 1], q[h + 1]).reshape(P, V**h, V)
            q[h] = rewards[h] + mdp.gamma * cont
    return q


def induced_reward_tables(f: LinearQ | QTables, mdp: TokenMdp, teacher: Policy) -> list[np.ndarray]:
    """``f(s, a) - gamma * E_teacher f(s', .)`` at every prefix; no continuation at the last depth."""
    tabs = _as_tables(f, mdp)
    P, V, H = mdp.prompt_count, mdp.vocab_size, mdp.horizon
    out = []
    for h in range(H):
        if h == H - 1:
            out.append(tabs[h].copy())
            continue
        nxt = teacher_probs_at_depth(mdp, teacher, h + 1)
        cont = np.einsum("xsa,xsa->xs", nxt, tabs[h + 1]).reshape(P, V**h, V)
        out.append(tabs[h] - mdp.gamma * cont)
    return out


def teacher_probs_at_depth(mdp: TokenMdp, teacher: Policy, h: int) -> np.ndarray:
    P, V = mdp.prompt_count, mdp.vocab_size
    n = V**h
    xs = np.repeat(np.arange(P), n)
    return teacher.probs_at(mdp, xs, h, np.tile(np.arange(n), P)).reshape(P, n, V)


def induced_reward(f: LinearQ | QTables, mdp: TokenMdp, teacher: Policy, prompt: int, state: Sequence[int], action: int) -> float:
    h = len(state)
    if h >= mdp.horizon or not 0 <= action < mdp.vocab_size:
        raise UnknownState(f"({tuple(state)}, {action}) is not a state-action pair of the MDP")
    code = 0
    for a in state:
        code = code * mdp.vocab_size + int(a)
    tabs = _as_tables(f, mdp)
    value = float(tabs[h][prompt, code, action])
    if h + 1 < mdp.horizon:
        nxt_code = code * mdp.vocab_size + action
        probs = teacher.probs_at(mdp, np.array([prompt]), h + 1, np.array([nxt_code]))[0]
        value -= mdp.gamma * float(probs @ tabs[h + 1][prompt, nxt_code])
    return value


def pdl_gap(
    mdp: TokenMdp,
    teacher: Policy,
    student: Policy,
    f: LinearQ | QTables,
    mode: str = "exact",
    n_samples: int = 0,
    rng: np.random.Generator | None = None,
) -> float:
    """``E_student sum_h gamma^h (E_teacher f(s_h, .) - f(s_h, a_h))``."""
    tabs = _as_tables(f, mdp)
    P, V, H = mdp.prompt_count, mdp.vocab_size, mdp.horizon
    if mode == "exact":
        mdp.check_enumerable()
        reach = np.ones((P, 1))
        total = 0.0
        for h in range(H):
            n = V**h
            xs = np.repeat(np.arange(P), n)
            prefixes = np.tile(np.arange(n), P)
            pi_s = student.probs_at(mdp, xs, h, prefixes).reshape(P, n, V)
            pi_e = teacher.probs_at(mdp, xs, h, prefixes).reshape(P, n, V)
            adv = np.einsum("xsa,xsa->xs", pi_e - pi_s, tabs[h])
            total += mdp.gamma**h * float(np.einsum("x,xs,xs->", mdp.d0, reach, adv))
            reach = (reach[:, :, None] * pi_s).reshape(P, n * V)
        return total
    if mode == "mc":
        if rng is None or n_samples < 1:
            raise ValueError("mc mode needs n_samples >= 1 and a generator")
        xs = sample_prompts(mdp, n_samples, rng)
        acts = sample_actions(mdp, student, xs, rng)
        prefix = np.zeros(n_samples, dtype=np.int64)
        total = np.zeros(n_samples)
        for h in range(H):
            row = tabs[h][xs, prefix]
            probs = teacher.probs_at(mdp, xs, h, prefix)
            total += mdp.gamma**h * (np.einsum("na,na->n", probs, row) - row[np.arange(n_samples), acts[:, h]])
            prefix = prefix * V + acts[:, h]
        return float(total.mean())
    raise ValueError(f"unknown mode {mode!r}")


@dataclass
class MmConfig:
    mode: str = "offline"
    offline: OfflineConfig = field(default_factory=OfflineConfig)
    online: OnlineConfig = field(default_factory=OnlineConfig)
    q_features: TokenMdp | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("offline", "online"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class MmResult:
    policy: SoftmaxLinearPolicy
    trace: Trace
    q: LinearQ
    policies: list[SoftmaxLinearPolicy] = field(default_factory=list)
    dataset: PreferenceDataset | None = None

    def __iter__(self):
        return iter((self.policy, self.trace))


def _with_mm_columns(trace: Trace, gap_col: str) -> Trace:
    out = Trace(list(trace.columns) + ["w_norm", "pdl_gap"])
    norm_i = list(trace.columns).index("theta_norm")
    gap_i = list(trace.columns).index(gap_col)
    out.rows = [row + (row[norm_i], row[gap_i]) for row in trace.rows]
    return out


def moment_critic(mdp: TokenMdp, teacher: Policy, q_features: TokenMdp | None = None) -> Critic:
    return Critic(mdp, teacher, MOMENT, q_features)


def solve_mm(
    mdp: TokenMdp,
    teacher: Policy,
    dataset: PreferenceDataset,
    mode: str,
    config: MmConfig,
    student_init: SoftmaxLinearPolicy | None = None,
    rstar=None,
    rng: np.random.Generator | None = None,
) -> MmResult:
    """Adversarial training with a teacher-Q adversary, offline or online."""
    critic = moment_critic(mdp, teacher, config.q_features)
    init = student_init if student_init is not None else SoftmaxLinearPolicy.uniform(mdp)
    if mode == "offline":
        if len(dataset) == 0:
            raise EmptyDataset("offline solver needs a non-empty preference dataset")
        data = PrefData.from_dataset(critic, dataset)
        res: SolverResult = run_adversarial_rounds(critic, data, config.offline, init, rstar, rng)
        q = LinearQ(res.theta, config.offline.bound, config.q_features)
        return MmResult(res.policy, _with_mm_columns(res.trace, "gap"), q, [res.policy], dataset)
    if mode == "online":
        if rng is None:
            raise ValueError("online mode needs a generator")
        out: OnlineResult = run_iterations(critic, init, config.online, rng, rstar, dataset if len(dataset) else None)
        q = LinearQ(out.theta, config.online.bound, config.q_features)
        return MmResult(out.policy, _with_mm_columns(out.trace, "gap_estimate"), q, out.policies, out.dataset)
    raise ValueError(f"unknown mode {mode!r}")
