"""Synthetic finite-horizon token-generation MDP.

States are output prefixes; an action appends one token, so transitions are
deterministic. Step features ``psi(x, s, a)`` depend on the prompt, the last
``context_len`` tokens of the prefix, the position and the action. They come
from a seeded random projection of a sparse indicator and are scaled to norm
exactly ``1 / horizon`` so that every trajectory feature

    phi(x, tau) = sum_h gamma**h * psi(x, s_h, a_h)

has Euclidean norm at most one.

Prefixes are addressed by their base-``V`` integer code (``prefix_idx``); the
empty prefix is 0 and appending action ``a`` maps ``i`` to ``i * V + a``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Protocol, Sequence

import numpy as np

from pbkd.errors import CapExceeded, DimensionMismatch, MalformedTrajectory

DEFAULT_ENUMERATION_CAP = 10**6


class Policy(Protocol):
    def probs_at(self, mdp: "TokenMdp", prompts: np.ndarray, h: int, prefix_idx: np.ndarray) -> np.ndarray:
        """Action distributions, shape ``(n, V)``, at depth ``h`` for each (prompt, prefix)."""
        ...


@dataclass(frozen=True, eq=False)
class TokenMdp:
    vocab_size: int
    horizon: int
    prompt_count: int = 1
    feature_dim: int = 8
    gamma: float = 1.0
    context_len: int = 1
    feature_seed: int = 0
    prompt_distribution: tuple[float, ...] | None = None
    enumeration_cap: int = DEFAULT_ENUMERATION_CAP
    # explicit (P, C, H, V, d) table; replaces the random projection when given
    feature_table: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        for name in ("vocab_size", "horizon", "prompt_count", "feature_dim", "context_len"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if float(self.vocab_size) ** self.horizon >= 2.0**62:
            raise ValueError("vocab_size**horizon must fit a 62-bit prefix code")
        d0 = self.d0
        if d0.shape != (self.prompt_count,) or np.any(d0 < 0) or abs(d0.sum() - 1.0) > 1e-12:
            raise ValueError("prompt_distribution must be a probability vector over prompts")
        if self.feature_table is not None:
            table = np.asarray(self.feature_table, dtype=float)
            if table.shape != self.table_shape:
                raise DimensionMismatch(f"feature_table shape {table.shape} != {self.table_shape}")
            if np.any(np.linalg.norm(table, axis=-1) > 1.0 / self.horizon + 1e-12):
                raise ValueError("step features must have norm at most 1/horizon")
            table.setflags(write=False)
            object.__setattr__(self, "feature_table", table)

    # ------------------------------------------------------------------ sizes
    @property
    def V(self) -> int:
        return self.vocab_size

    @property
    def H(self) -> int:
        return self.horizon

    @property
    def d(self) -> int:
        return self.feature_dim

    @property
    def n_contexts(self) -> int:
        return (self.vocab_size + 1) ** self.context_len

    @property
    def table_shape(self) -> tuple[int, ...]:
        return (self.prompt_count, self.n_contexts, self.horizon, self.vocab_size, self.feature_dim)

    @property
    def n_trajectories(self) -> int:
        return self.vocab_size**self.horizon

    @cached_property
    def d0(self) -> np.ndarray:
        if self.prompt_distribution is None:
            d0 = np.full(self.prompt_count, 1.0 / self.prompt_count)
        else:
            d0 = np.asarray(self.prompt_distribution, dtype=float)
        d0.setflags(write=False)
        return d0

    def check_enumerable(self) -> None:
        if self.n_trajectories > self.enumeration_cap:
            raise CapExceeded(
                f"V**H = {self.n_trajectories} exceeds enumeration cap {self.enumeration_cap}"
            )

    # --------------------------------------------------------------- features
    @cached_property
    def psi(self) -> np.ndarray:
        """Step feature table indexed ``[prompt, context, h, action]``."""
        if self.feature_table is not None:
            return self.feature_table
        P, C, H, V, d = self.table_shape
        k = self.context_len
        rng = np.random.default_rng(self.feature_seed)
        # indicator blocks: prompt | k context slots | position | action | (context, action)
        n_rows = P + k * (V + 1) + H + V + C * V
        proj = rng.standard_normal((n_rows, d))
        off_slot = P
        off_pos = off_slot + k * (V + 1)
        off_act = off_pos + H
        off_joint = off_act + V

        ctx_tokens = np.array(list(itertools.product(range(V + 1), repeat=k)))[:, ::-1]
        # ctx_tokens[c, j] is the token j steps back (j = 0 newest)
        slot_rows = off_slot + np.arange(k) * (V + 1) + ctx_tokens  # (C, k)
        slot_sum = proj[slot_rows].sum(axis=1)  # (C, d)

        table = (
            proj[:P][:, None, None, None, :]
            + slot_sum[None, :, None, None, :]
            + proj[off_pos : off_pos + H][None, None, :, None, :]
            + proj[off_act : off_act + V][None, None, None, :, :]
            + proj[off_joint:].reshape(C, V, d)[None, :, None, :, :]
        )
        norms = np.linalg.norm(table, axis=-1, keepdims=True)
        table = table / (norms * H)
        table.setflags(write=False)
        return table

    def step_feature(self, prompt: int, prefix: Sequence[int], action: int) -> np.ndarray:
        h = len(prefix)
        return self.psi[prompt, self.context_of(prefix), h, action]

    def context_of(self, prefix: Sequence[int]) -> int:
        """Context code of an explicit prefix (newest token least significant)."""
        base = self.vocab_size + 1
        code = 0
        for j in range(self.context_len):
            tok = prefix[len(prefix) - 1 - j] if len(prefix) - 1 - j >= 0 else self.vocab_size
            code += int(tok) * base**j
        return code

    def context_index(self, h: int, prefix_idx: np.ndarray) -> np.ndarray:
        """Vectorized context code for prefixes of length ``h`` given by their codes."""
        V = self.vocab_size
        base = V + 1
        prefix_idx = np.asarray(prefix_idx, dtype=np.int64)
        code = np.zeros_like(prefix_idx)
        for j in range(self.context_len):
            if h - 1 - j >= 0:
                tok = (prefix_idx // V**j) % V
            else:
                tok = np.full_like(prefix_idx, V)
            code += tok * base**j
        return code

    def batch_features(self, prompts: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Trajectory features for ``actions`` of shape ``(n, H)``; returns ``(n, d)``."""
        prompts = np.asarray(prompts, dtype=np.int64)
        actions = np.asarray(actions, dtype=np.int64)
        n = actions.shape[0]
        out = np.zeros((n, self.feature_dim))
        prefix = np.zeros(n, dtype=np.int64)
        for h in range(self.horizon):
            ctx = self.context_index(h, prefix)
            out = out + (self.gamma**h) * self.psi[prompts, ctx, h, actions[:, h]]
            prefix = prefix * self.vocab_size + actions[:, h]
        return out

    # ------------------------------------------------------------ enumeration
    @cached_property
    def all_actions(self) -> np.ndarray:
        """Every action sequence, lexicographic; row ``i`` has prefix code ``i // V**(H-h)``."""
        self.check_enumerable()
        V, H = self.vocab_size, self.horizon
        idx = np.arange(V**H, dtype=np.int64)
        acts = np.empty((V**H, H), dtype=np.int64)
        for h in range(H):
            acts[:, h] = (idx // V ** (H - 1 - h)) % V
        acts.setflags(write=False)
        return acts

    @cached_property
    def prefix_codes(self) -> np.ndarray:
        """``prefix_codes[i, h]`` is the code of the length-``h`` prefix of trajectory ``i``."""
        V, H = self.vocab_size, self.horizon
        idx = np.arange(V**H, dtype=np.int64)
        codes = np.stack([idx // V ** (H - h) for h in range(H)], axis=1)
        codes.setflags(write=False)
        return codes

    @cached_property
    def feature_matrix(self) -> np.ndarray:
        """Features of every enumerated trajectory, shape ``(P, V**H, d)``."""
        acts = self.all_actions
        n = acts.shape[0]
        mats = np.stack(
            [self.batch_features(np.full(n, x), acts) for x in range(self.prompt_count)]
        )
        mats.setflags(write=False)
        return mats

    @cached_property
    def step_feature_tensor(self) -> np.ndarray:
        """``psi`` along every enumerated trajectory, shape ``(P, V**H, H, d)``."""
        acts = self.all_actions
        codes = self.prefix_codes
        P = self.prompt_count
        out = np.empty((P, acts.shape[0], self.horizon, self.feature_dim))
        for h in range(self.horizon):
            ctx = self.context_index(h, codes[:, h])
            out[:, :, h, :] = self.psi[:, ctx, h, acts[:, h]]
        out.setflags(write=False)
        return out

    # ---------------------------------------------------------- serialization
    def to_dict(self) -> dict[str, Any]:
        if self.feature_table is not None:
            raise ValueError("MDPs with explicit feature tables are not serializable")
        out: dict[str, Any] = {
            "V": self.vocab_size,
            "H": self.horizon,
            "gamma": float(self.gamma),
            "d": self.feature_dim,
            "prompt_count": self.prompt_count,
            "k": self.context_len,
            "feature_seed": self.feature_seed,
            "enumeration_cap": self.enumeration_cap,
        }
        if self.prompt_distribution is not None:
            out["prompt_distribution"] = [float(p) for p in self.prompt_distribution]
        return out

    @classmethod
    def from_dict(cls, spec: dict[str, Any]) -> "TokenMdp":
        d0 = spec.get("prompt_distribution")
        return cls(
            vocab_size=int(spec["V"]),
            horizon=int(spec["H"]),
            prompt_count=int(spec.get("prompt_count", 1)),
            feature_dim=int(spec.get("d", 8)),
            gamma=float(spec.get("gamma", 1.0)),
            context_len=int(spec.get("k", 1)),
            feature_seed=int(spec.get("feature_seed", 0)),
            prompt_distribution=tuple(float(p) for p in d0) if d0 is not None else None,
            enumeration_cap=int(spec.get("enumeration_cap", DEFAULT_ENUMERATION_CAP)),
        )

    def same_spec(self, other: "TokenMdp") -> bool:
        if self.feature_table is not None or other.feature_table is not None:
            return self is other
        return self.to_dict() == other.to_dict()


@dataclass(frozen=True, eq=False)
class Trajectory:
    prompt: int
    actions: tuple[int, ...]
    features: np.ndarray = field(repr=False)


def validate_actions(mdp: TokenMdp, prompt: int, actions: Sequence[int]) -> tuple[int, ...]:
    acts = tuple(int(a) for a in actions)
    if len(acts) != mdp.horizon:
        raise MalformedTrajectory(f"expected {mdp.horizon} actions, got {len(acts)}")
    if any(a < 0 or a >= mdp.vocab_size for a in acts):
        raise MalformedTrajectory(f"action out of range 0..{mdp.vocab_size - 1}: {acts}")
    if not 0 <= int(prompt) < mdp.prompt_count:
        raise MalformedTrajectory(f"prompt {prompt} out of range")
    return acts


def make_trajectory(mdp: TokenMdp, prompt: int, actions: Sequence[int]) -> Trajectory:
    acts = validate_actions(mdp, prompt, actions)
    feats = mdp.batch_features(np.array([prompt]), np.array([acts]))[0]
    feats.setflags(write=False)
    return Trajectory(int(prompt), acts, feats)


def trajectory_features(mdp: TokenMdp, traj: Trajectory) -> np.ndarray:
    """Discounted sum of step features, recomputed step by step from the prefix."""
    acts = validate_actions(mdp, traj.prompt, traj.actions)
    out = np.zeros(mdp.feature_dim)
    for h in range(mdp.horizon):
        out = out + (mdp.gamma**h) * mdp.step_feature(traj.prompt, acts[:h], acts[h])
    return out


def enumerate_trajectories(mdp: TokenMdp, prompt: int) -> list[Trajectory]:
    """All ``V**H`` trajectories for ``prompt`` in lexicographic order."""
    acts = mdp.all_actions
    feats = mdp.feature_matrix[prompt]
    out = []
    for i in range(acts.shape[0]):
        f = feats[i].copy()
        f.setflags(write=False)
        out.append(Trajectory(int(prompt), tuple(int(a) for a in acts[i]), f))
    return out


def _draw(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    a = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(a, probs.shape[1] - 1)


def sample_actions(mdp: TokenMdp, policy: Policy, prompts: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Roll out ``policy`` from each prompt; one uniform draw per step per row."""
    prompts = np.asarray(prompts, dtype=np.int64)
    n = prompts.shape[0]
    acts = np.empty((n, mdp.horizon), dtype=np.int64)
    prefix = np.zeros(n, dtype=np.int64)
    for h in range(mdp.horizon):
        probs = policy.probs_at(mdp, prompts, h, prefix)
        acts[:, h] = _draw(probs, rng.random(n))
        prefix = prefix * mdp.vocab_size + acts[:, h]
    return acts


def sample_prompts(mdp: TokenMdp, n: int, rng: np.random.Generator) -> np.ndarray:
    return _draw(np.broadcast_to(mdp.d0, (n, mdp.prompt_count)), rng.random(n))


def rollout(mdp: TokenMdp, policy: Policy, prompt: int, rng: np.random.Generator) -> Trajectory:
    acts = sample_actions(mdp, policy, np.array([prompt]), rng)
    return make_trajectory(mdp, prompt, acts[0])
