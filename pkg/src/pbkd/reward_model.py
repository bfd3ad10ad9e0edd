"""Linear rewards, BTL preference probabilities and maximum-likelihood fitting."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from pbkd.errors import DimensionMismatch, EmptyDataset, NonFinite
from pbkd.preference_data import PreferenceDataset, PreferenceSample, sigmoid
from pbkd.seq_mdp import TokenMdp, Trajectory

GAP_CLAMP = 30.0


def project_ball(theta: np.ndarray, bound: float) -> np.ndarray:
    norm = float(np.linalg.norm(theta))
    if norm <= bound:
        return theta
    return theta * (bound / norm)


@dataclass(frozen=True, eq=False)
class LinearReward:
    theta: np.ndarray
    bound: float

    def __post_init__(self) -> None:
        theta = np.array(self.theta, dtype=float).ravel()
        if self.bound <= 0:
            raise ValueError("bound must be positive")
        if np.linalg.norm(theta) > self.bound + 1e-12:
            raise ValueError(f"|theta| = {np.linalg.norm(theta):.6g} exceeds bound {self.bound}")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @classmethod
    def projected(cls, theta: np.ndarray, bound: float) -> "LinearReward":
        return cls(project_ball(np.asarray(theta, dtype=float), bound), bound)

    @classmethod
    def zero(cls, d: int, bound: float) -> "LinearReward":
        return cls(np.zeros(d), bound)

    @property
    def d(self) -> int:
        return int(self.theta.shape[0])

    def to_record(self, feature_seed: int | None = None) -> dict[str, Any]:
        return {
            "theta": [repr(float(v)) for v in self.theta],
            "bound": repr(float(self.bound)),
            "feature_seed": feature_seed,
        }

    @classmethod
    def from_record(cls, rec: dict[str, Any]) -> "LinearReward":
        return cls(np.array([float(v) for v in rec["theta"]]), float(rec["bound"]))

    def dumps(self, feature_seed: int | None = None) -> str:
        return json.dumps(self.to_record(feature_seed))


def _check_dim(rm: LinearReward, mdp: TokenMdp) -> None:
    if rm.d != mdp.feature_dim:
        raise DimensionMismatch(f"reward dimension {rm.d} != feature dimension {mdp.feature_dim}")


def traj_reward(rm: LinearReward, mdp: TokenMdp, traj: Trajectory) -> float:
    _check_dim(rm, mdp)
    return float(rm.theta @ traj.features)


def btl_prob(rm: LinearReward, mdp: TokenMdp, prompt: int, traj0: Trajectory, traj1: Trajectory) -> float:
    """P(traj0 preferred over traj1) under the BTL model."""
    _check_dim(rm, mdp)
    if traj0.prompt != prompt or traj1.prompt != prompt:
        raise ValueError("trajectories do not belong to the given prompt")
    return float(sigmoid(rm.theta @ (traj0.features - traj1.features)))


# ---------------------------------------------------------------------------
# array-level objective
# ---------------------------------------------------------------------------


def log_sigmoid(z: np.ndarray) -> np.ndarray:
    return -np.logaddexp(0.0, -z)


def signed_gaps(theta: np.ndarray, diffs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """``(2o - 1) * theta . diff``, clamped; the log-likelihood is ``sum log sigmoid`` of this."""
    z = np.clip(diffs @ theta, -GAP_CLAMP, GAP_CLAMP)
    return np.where(labels == 1, z, -z)


def loglik_arrays(theta: np.ndarray, diffs: np.ndarray, labels: np.ndarray, weights: np.ndarray | None = None) -> float:
    terms = log_sigmoid(signed_gaps(theta, diffs, labels))
    return float(terms.sum() if weights is None else weights @ terms)


def loglik_grad_arrays(theta: np.ndarray, diffs: np.ndarray, labels: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    resid = labels - sigmoid(diffs @ theta)
    if weights is not None:
        resid = resid * weights
    return resid @ diffs


def compress(diffs: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Merge identical (diff, label) rows into weighted rows; sums are unchanged."""
    if len(labels) == 0:
        return diffs, labels, np.zeros(0)
    rows = np.concatenate([diffs, labels[:, None].astype(float)], axis=1)
    uniq, inv, counts = np.unique(rows, axis=0, return_inverse=True, return_counts=True)
    return uniq[:, :-1], uniq[:, -1].astype(np.int64), counts.astype(float)


# ---------------------------------------------------------------------------
# dataset-level objectives
# ---------------------------------------------------------------------------


def loglik(rm: LinearReward | np.ndarray, dataset: PreferenceDataset, mdp: TokenMdp) -> float:
    """``sum_n log P_r(o_n | x_n, tau0_n, tau1_n)``."""
    if len(dataset) == 0:
        raise EmptyDataset("log-likelihood of an empty dataset")
    theta = np.asarray(getattr(rm, "theta", rm), dtype=float)
    if theta.shape[0] != mdp.feature_dim:
        raise DimensionMismatch(f"reward dimension {theta.shape[0]} != feature dimension {mdp.feature_dim}")
    return loglik_arrays(theta, dataset.feature_diffs(mdp), dataset.labels)


def loglik_grad(rm: LinearReward | np.ndarray, dataset: PreferenceDataset, mdp: TokenMdp) -> np.ndarray:
    if len(dataset) == 0:
        raise EmptyDataset("log-likelihood of an empty dataset")
    theta = np.asarray(getattr(rm, "theta", rm), dtype=float)
    return loglik_grad_arrays(theta, dataset.feature_diffs(mdp), dataset.labels)


def relative_loss(rm: LinearReward, rstar: LinearReward, sample: PreferenceSample) -> float:
    """``0.5 * log(P_r(o) / P_r*(o))`` for one labeled comparison."""
    if rm.d != rstar.d or rm.d != sample.traj0.features.shape[0]:
        raise DimensionMismatch("reward and feature dimensions disagree")
    diff = (sample.traj0.features - sample.traj1.features)[None, :]
    lab = np.array([sample.label])
    return 0.5 * (loglik_arrays(rm.theta, diff, lab) - loglik_arrays(rstar.theta, diff, lab))


def in_confidence_set(
    rm: LinearReward | np.ndarray, dataset: PreferenceDataset, mdp: TokenMdp, zeta: float, max_loglik: float
) -> bool:
    return loglik(rm, dataset, mdp) >= max_loglik - zeta


def offline_zeta(d: int, bound: float, n: int, c: float = 1.0) -> float:
    """Confidence slack in log-likelihood units for ``n`` offline comparisons."""
    n = max(int(n), 1)
    return c * np.sqrt(d * max(np.log(bound * n), 0.0) / n) * n


def online_zeta(d: int, bound: float, t: int, delta: float = 0.05, c: float = 1.0) -> float:
    return c * (d * np.log(bound * max(t, 2)) + np.log(1.0 / delta))


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


@dataclass
class MleOptions:
    grad_tol: float = 1e-8
    max_iter: int = 10_000
    max_backtracks: int = 60


@dataclass
class MleFit:
    reward: LinearReward
    loglik: float
    iterations: int
    history: list[float] = field(repr=False, default_factory=list)

    @property
    def theta(self) -> np.ndarray:
        return self.reward.theta


def maximize_penalized(
    diffs: np.ndarray,
    labels: np.ndarray,
    bound: float,
    lin: np.ndarray | None = None,
    beta: float = 1.0,
    weights: np.ndarray | None = None,
    theta0: np.ndarray | None = None,
    max_iter: int = 10_000,
    grad_tol: float = 1e-8,
    step0: float | None = None,
    max_backtracks: int = 60,
) -> tuple[np.ndarray, float, int, list[float], float]:
    """Projected gradient ascent on ``lin . theta + beta * loglik(theta)`` over the ``bound`` ball.

    The step is backtracked until it passes a local Lipschitz test on the
    gradient, which is what guarantees ascent for a concave smooth objective.
    Testing gradients rather than objective values keeps the line search
    meaningful when improvements fall below the rounding error of a large sum.
    Returns ``(theta, objective, iterations, history, last_step)``; the last
    step size can be fed back as ``step0`` to warm-start a later call.
    """
    d = diffs.shape[1]
    lin = np.zeros(d) if lin is None else np.asarray(lin, dtype=float)
    w = np.ones(len(labels)) if weights is None else weights

    def objective(th: np.ndarray) -> float:
        ll = loglik_arrays(th, diffs, labels, w) if beta != 0 else 0.0
        return float(lin @ th) + beta * ll

    def gradient(th: np.ndarray) -> np.ndarray:
        g = lin.copy()
        if beta != 0:
            g += beta * loglik_grad_arrays(th, diffs, labels, w)
        return g

    theta = project_ball(np.zeros(d) if theta0 is None else np.asarray(theta0, dtype=float), bound)
    obj = objective(theta)
    history = [obj]
    if step0 is None:
        curv = 0.25 * beta * float(w @ np.sum(diffs**2, axis=1))
        step0 = 1.0 / curv if curv > 0 else 1e12
    step = step0
    grad = gradient(theta)
    it = 0
    for it in range(1, max_iter + 1):
        if not np.all(np.isfinite(grad)):
            raise NonFinite("penalized objective gradient is not finite")
        for _ in range(max_backtracks):
            cand = project_ball(theta + step * grad, bound)
            move = cand - theta
            cand_grad = gradient(cand)
            if step * np.linalg.norm(cand_grad - grad) <= np.linalg.norm(move) * (1 + 1e-12):
                break
            step *= 0.5
        mapping = np.linalg.norm(move) / step
        theta, grad = cand, cand_grad
        obj = objective(theta)
        if not np.isfinite(obj):
            raise NonFinite("penalized objective diverged")
        history.append(obj)
        if mapping <= grad_tol:
            break
        step *= 2.0
    return theta, obj, it, history, step


def fit_mle(
    dataset: PreferenceDataset,
    mdp: TokenMdp,
    d: int,
    bound: float,
    opts: MleOptions | None = None,
    theta0: np.ndarray | None = None,
) -> MleFit:
    """Constrained MLE of a linear BTL reward on ``dataset``."""
    if len(dataset) == 0:
        raise EmptyDataset("cannot fit a reward on an empty dataset")
    if d != mdp.feature_dim:
        raise DimensionMismatch(f"requested dimension {d} != feature dimension {mdp.feature_dim}")
    opts = opts or MleOptions()
    diffs, labels, w = compress(dataset.feature_diffs(mdp), dataset.labels)
    theta, _, it, history, _ = maximize_penalized(
        diffs, labels, bound, weights=w, theta0=theta0,
        max_iter=opts.max_iter, grad_tol=opts.grad_tol, max_backtracks=opts.max_backtracks,
    )
    # report the objective as an exact unweighted sum over records
    return MleFit(LinearReward(theta, bound), loglik(theta, dataset, mdp), it, history)
