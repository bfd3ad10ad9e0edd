"""Preference datasets: generation, labeling, append-only growth, JSONL storage.

A label ``o = 1`` means the first trajectory was preferred.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from pbkd.errors import DimensionMismatch, IterationOrderViolation, MissingOracle
from pbkd.seq_mdp import TokenMdp, Trajectory, make_trajectory, sample_actions, sample_prompts

RECORD_VERSION = 1
OFFLINE_BTL = "offline-btl"
ONLINE_FORCED = "online-forced"
ONLINE_BTL = "online-btl"
PROVENANCES = (OFFLINE_BTL, ONLINE_FORCED, ONLINE_BTL)


def sigmoid(z: np.ndarray | float) -> np.ndarray | float:
    z = np.clip(z, -30.0, 30.0)
    return 1.0 / (1.0 + np.exp(-z))


@dataclass(frozen=True)
class PreferenceSample:
    label: int
    prompt: int
    traj0: Trajectory
    traj1: Trajectory
    provenance: str
    iteration: int = -1
    seeds: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.traj0.prompt != self.prompt or self.traj1.prompt != self.prompt:
            raise ValueError("both trajectories must belong to the sample's prompt")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PreferenceDataset:
    """Columnar, immutable preference set. ``append`` returns a new dataset."""

    labels: np.ndarray
    prompts: np.ndarray
    actions0: np.ndarray
    actions1: np.ndarray
    provenance: tuple[str, ...]
    iteration: np.ndarray
    seeds: tuple[tuple[int, ...], ...]
    meta: dict[str, Any] = field(default_factory=dict)
    _cache: dict[str, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        n = len(self.labels)
        for name in ("labels", "prompts", "iteration"):
            arr = np.array(getattr(self, name), dtype=np.int64).reshape(n)
            object.__setattr__(self, name, _frozen(arr))
        for name in ("actions0", "actions1"):
            arr = np.array(getattr(self, name), dtype=np.int64)
            if arr.size == 0:
                arr = arr.reshape(0, arr.shape[1] if arr.ndim == 2 else 0)
            object.__setattr__(self, name, _frozen(arr))
        if len(self.provenance) != n or len(self.seeds) != n or len(self.actions0) != n or len(self.actions1) != n:
            raise ValueError("dataset columns have inconsistent lengths")
        if n and np.any(np.diff(self.iteration) < 0):
            raise IterationOrderViolation("iteration indices must be non-decreasing")

    @classmethod
    def empty(cls, horizon: int, meta: dict[str, Any] | None = None) -> "PreferenceDataset":
        z = np.zeros(0, dtype=np.int64)
        za = np.zeros((0, horizon), dtype=np.int64)
        return cls(z, z, za, za, (), z, (), dict(meta or {}))

    @classmethod
    def from_samples(cls, samples: Sequence[PreferenceSample], horizon: int, meta: dict[str, Any] | None = None) -> "PreferenceDataset":
        return append(cls.empty(horizon, meta), samples)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def N(self) -> int:
        return len(self)

    @property
    def horizon(self) -> int:
        return int(self.actions0.shape[1])

    def sample(self, i: int, mdp: TokenMdp) -> PreferenceSample:
        x = int(self.prompts[i])
        return PreferenceSample(
            int(self.labels[i]),
            x,
            make_trajectory(mdp, x, self.actions0[i]),
            make_trajectory(mdp, x, self.actions1[i]),
            self.provenance[i],
            int(self.iteration[i]),
            self.seeds[i],
        )

    def samples(self, mdp: TokenMdp) -> list[PreferenceSample]:
        return [self.sample(i, mdp) for i in range(len(self))]

    def subset(self, idx: Sequence[int] | np.ndarray) -> "PreferenceDataset":
        idx = np.sort(np.asarray(idx, dtype=np.int64))
        return PreferenceDataset(
            self.labels[idx],
            self.prompts[idx],
            self.actions0[idx],
            self.actions1[idx],
            tuple(self.provenance[i] for i in idx),
            self.iteration[idx],
            tuple(self.seeds[i] for i in idx),
            dict(self.meta),
        )

    def feature_diffs(self, mdp: TokenMdp) -> np.ndarray:
        """``phi(x, tau0) - phi(x, tau1)`` for every record, shape ``(N, d)``."""
        if len(self) and self.horizon != mdp.horizon:
            raise DimensionMismatch(f"dataset horizon {self.horizon} != MDP horizon {mdp.horizon}")
        key = json.dumps(mdp.to_dict(), sort_keys=True) if mdp.feature_table is None else f"id:{id(mdp)}"
        if key not in self._cache:
            diffs = mdp.batch_features(self.prompts, self.actions0) - mdp.batch_features(self.prompts, self.actions1)
            self._cache[key] = _frozen(diffs)
        return self._cache[key]

    def equals(self, other: "PreferenceDataset") -> bool:
        return (
            np.array_equal(self.labels, other.labels)
            and np.array_equal(self.prompts, other.prompts)
            and np.array_equal(self.actions0, other.actions0)
            and np.array_equal(self.actions1, other.actions1)
            and self.provenance == other.provenance
            and np.array_equal(self.iteration, other.iteration)
            and self.seeds == other.seeds
        )

    # serialization -----------------------------------------------------

    def records(self) -> Iterable[dict[str, Any]]:
        for i in range(len(self)):
            yield {
                "version": RECORD_VERSION,
                "o": int(self.labels[i]),
                "x": int(self.prompts[i]),
                "actions0": [int(a) for a in self.actions0[i]],
                "actions1": [int(a) for a in self.actions1[i]],
                "provenance": self.provenance[i],
                "iteration": int(self.iteration[i]),
                "seeds": list(self.seeds[i]),
            }

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.records())

    @classmethod
    def from_jsonl(cls, text: str, horizon: int, meta: dict[str, Any] | None = None) -> "PreferenceDataset":
        recs = [json.loads(line) for line in text.splitlines() if line.strip()]
        for r in recs:
            if r.get("version") != RECORD_VERSION:
                raise ValueError(f"unsupported record version {r.get('version')}")
        n = len(recs)
        if n == 0:
            return cls.empty(horizon, meta)
        return cls(
            np.array([r["o"] for r in recs]),
            np.array([r["x"] for r in recs]),
            np.array([r["actions0"] for r in recs]).reshape(n, horizon),
            np.array([r["actions1"] for r in recs]).reshape(n, horizon),
            tuple(r["provenance"] for r in recs),
            np.array([r["iteration"] for r in recs]),
            tuple(tuple(r["seeds"]) for r in recs),
            dict(meta or {}),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def load(cls, path: str | Path, horizon: int) -> "PreferenceDataset":
        return cls.from_jsonl(Path(path).read_text(), horizon)


def concat(a: PreferenceDataset, b: PreferenceDataset) -> PreferenceDataset:
    if len(a) and len(b) and b.iteration[0] < a.iteration[-1]:
        raise IterationOrderViolation(
            f"new iteration {int(b.iteration[0])} precedes existing {int(a.iteration[-1])}"
        )
    if len(b) == 0:
        return a
    if len(a) == 0:
        return PreferenceDataset(b.labels, b.prompts, b.actions0, b.actions1, b.provenance, b.iteration, b.seeds, {**a.meta, **b.meta})
    return PreferenceDataset(
        np.concatenate([a.labels, b.labels]),
        np.concatenate([a.prompts, b.prompts]),
        np.concatenate([a.actions0, b.actions0]),
        np.concatenate([a.actions1, b.actions1]),
        a.provenance + b.provenance,
        np.concatenate([a.iteration, b.iteration]),
        a.seeds + b.seeds,
        dict(a.meta),
    )


def append(dataset: PreferenceDataset, samples: Sequence[PreferenceSample] | PreferenceDataset) -> PreferenceDataset:
    if isinstance(samples, PreferenceDataset):
        return concat(dataset, samples)
    if len(samples) == 0:
        return dataset
    H = dataset.horizon
    for s in samples:
        if len(s.traj0.actions) != H or len(s.traj1.actions) != H:
            raise DimensionMismatch("sample horizon differs from the dataset's")
    new = PreferenceDataset(
        np.array([s.label for s in samples]),
        np.array([s.prompt for s in samples]),
        np.array([s.traj0.actions for s in samples]),
        np.array([s.traj1.actions for s in samples]),
        tuple(s.provenance for s in samples),
        np.array([s.iteration for s in samples]),
        tuple(tuple(s.seeds) for s in samples),
    )
    return concat(dataset, new)


def _theta(reward: Any) -> np.ndarray:
    return np.asarray(getattr(reward, "theta", reward), dtype=float)


def gen_offline(
    mdp: TokenMdp,
    mu0: Any,
    mu1: Any,
    rstar: Any,
    n: int,
    rng: np.random.Generator,
    seeds: tuple[int, ...] = (),
) -> PreferenceDataset:
    """``n`` BTL-labeled comparisons between rollouts of ``mu0`` and ``mu1``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    xs = sample_prompts(mdp, n, rng)
    a0 = sample_actions(mdp, mu0, xs, rng)
    a1 = sample_actions(mdp, mu1, xs, rng)
    diffs = mdp.batch_features(xs, a0) - mdp.batch_features(xs, a1)
    p = sigmoid(diffs @ _theta(rstar))
    labels = (rng.random(n) < p).astype(np.int64)
    return PreferenceDataset(labels, xs, a0, a1, (OFFLINE_BTL,) * n, np.full(n, -1), (tuple(seeds),) * n)


def gen_online_batch(
    mdp: TokenMdp,
    teacher: Any,
    student: Any,
    iteration: int,
    n: int,
    labeling: str,
    rstar_opt: Any,
    rng: np.random.Generator,
    seeds: tuple[int, ...] = (),
) -> PreferenceDataset:
    """Teacher-vs-student comparisons; the teacher rollout is always ``traj0``."""
    if labeling not in ("forced", "oracle"):
        raise ValueError(f"unknown labeling {labeling!r}")
    if labeling == "oracle" and rstar_opt is None:
        raise MissingOracle("oracle labeling needs the ground-truth reward")
    xs = sample_prompts(mdp, n, rng)
    a0 = sample_actions(mdp, teacher, xs, rng)
    a1 = sample_actions(mdp, student, xs, rng)
    if labeling == "forced":
        labels = np.ones(n, dtype=np.int64)
        tag = ONLINE_FORCED
    else:
        diffs = mdp.batch_features(xs, a0) - mdp.batch_features(xs, a1)
        labels = (rng.random(n) < sigmoid(diffs @ _theta(rstar_opt))).astype(np.int64)
        tag = ONLINE_BTL
    return PreferenceDataset(labels, xs, a0, a1, (tag,) * n, np.full(n, iteration), (tuple(seeds),) * n)


def gen_online_sample(
    mdp: TokenMdp,
    teacher: Any,
    student: Any,
    iteration: int,
    labeling: str,
    rstar_opt: Any,
    rng: np.random.Generator,
) -> PreferenceSample:
    return gen_online_batch(mdp, teacher, student, iteration, 1, labeling, rstar_opt, rng).sample(0, mdp)
