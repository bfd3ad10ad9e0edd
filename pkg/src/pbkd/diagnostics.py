"""Theory-facing measurements: covariances, concentrability, lemma probes, regret and rate fits."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import minimize

from pbkd.errors import DimensionMismatch, EmptyDataset, NonPositivePoint
from pbkd.policies import Policy, SoftmaxLinearPolicy, exact_value, feature_expectation, trajectory_probs
from pbkd.preference_data import PreferenceDataset, sigmoid
from pbkd.reward_model import fit_mle, loglik_arrays, loglik_grad_arrays, offline_zeta
from pbkd.seq_mdp import TokenMdp

OFFLINE = "offline"
ONLINE = "online"


@dataclass(frozen=True, eq=False)
class CovarianceMatrix:
    matrix: np.ndarray
    ridge: float
    bound: float
    provenance: str = OFFLINE

    def __post_init__(self) -> None:
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise DimensionMismatch("covariance must be square")
        if not np.allclose(m, m.T, atol=1e-10, rtol=0):
            raise ValueError("covariance must be symmetric")
        m = 0.5 * (m + m.T)
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        try:
            object.__setattr__(self, "_cho", cho_factor(m))
        except LinAlgError as exc:
            raise ValueError("covariance is not positive-definite") from exc

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    def solve(self, v: np.ndarray) -> np.ndarray:
        return cho_solve(self._cho, v)

    def scaled(self, c: float) -> "CovarianceMatrix":
        return CovarianceMatrix(self.matrix * c, self.ridge * c, self.bound, self.provenance)


def pair_second_moment(mdp: TokenMdp, mu0: Policy, mu1: Policy) -> np.ndarray:
    """Exact ``E[(phi0 - phi1)(phi0 - phi1)^T]`` with ``tau0 ~ mu0``, ``tau1 ~ mu1`` independent given ``x``."""
    F = mdp.feature_matrix
    p0, p1 = trajectory_probs(mdp, mu0), trajectory_probs(mdp, mu1)
    s0 = np.einsum("xi,xid,xie->xde", p0, F, F)
    s1 = np.einsum("xi,xid,xie->xde", p1, F, F)
    m0 = np.einsum("xi,xid->xd", p0, F)
    m1 = np.einsum("xi,xid->xd", p1, F)
    cross = np.einsum("xd,xe->xde", m0, m1)
    per_x = s0 + s1 - cross - cross.transpose(0, 2, 1)
    return np.einsum("x,xde->de", mdp.d0, per_x)


def build_sigma_offline(
    source: PreferenceDataset | tuple[Policy, Policy],
    mdp: TokenMdp,
    lam: float,
    bound: float,
    mode: str = "empirical",
) -> CovarianceMatrix:
    """``(lam / B) I`` plus the second moment of preference feature differences."""
    if lam <= 0:
        raise ValueError("lam must be positive")
    d = mdp.feature_dim
    if mode == "empirical":
        if not isinstance(source, PreferenceDataset):
            raise TypeError("empirical mode needs a preference dataset")
        if len(source) == 0:
            raise EmptyDataset("empirical covariance of an empty dataset")
        diffs = source.feature_diffs(mdp)
        moment = diffs.T @ diffs / len(diffs)
    elif mode == "exact":
        mu0, mu1 = source  # type: ignore[misc]
        moment = pair_second_moment(mdp, mu0, mu1)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return CovarianceMatrix((lam / bound) * np.eye(d) + moment, lam, bound, OFFLINE)


def weighted_norm(v: np.ndarray, sigma: CovarianceMatrix) -> float:
    """``sqrt(v^T sigma^-1 v)`` through the Cholesky factor."""
    v = np.asarray(v, dtype=float)
    if v.shape != (sigma.d,):
        raise DimensionMismatch(f"vector of shape {v.shape} against a {sigma.d}x{sigma.d} covariance")
    return float(np.sqrt(max(v @ sigma.solve(v), 0.0)))


def concentrability_linear(mdp: TokenMdp, teacher: Policy, pistar: Policy, sigma: CovarianceMatrix) -> float:
    diff = feature_expectation(mdp, teacher) - feature_expectation(mdp, pistar)
    return float(np.sqrt(2.0) * weighted_norm(diff, sigma))


@dataclass
class RatioProbe:
    bound: float
    sampled_sup: float
    n_admissible: int
    n_sampled: int


def sampled_concentrability(
    mdp: TokenMdp,
    teacher: Policy,
    pistar: Policy,
    mu0: Policy,
    mu1: Policy,
    rstar,
    lam: float,
    bound: float,
    n: int,
    rng: np.random.Generator,
) -> RatioProbe:
    """Sampled lower estimate of the concentrability supremum next to its linear-case bound.

    Rewards are drawn uniformly from the ``bound`` ball. Only directions
    ``v = theta* - theta`` whose data second moment dominates the ridge,
    ``(lam / B) |v|^2 <= v^T M v``, enter the supremum; on those the bound is
    guaranteed, elsewhere the ridge can make the ratio exceed it.
    """
    theta_star = np.asarray(getattr(rstar, "theta", rstar), dtype=float)
    d = theta_star.shape[0]
    M = pair_second_moment(mdp, mu0, mu1)
    sigma = CovarianceMatrix((lam / bound) * np.eye(d) + M, lam, bound)
    diff = feature_expectation(mdp, teacher) - feature_expectation(mdp, pistar)
    directions = rng.normal(size=(n, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = bound * rng.random(n) ** (1.0 / d)
    thetas = directions * radii[:, None]
    v = theta_star[None, :] - thetas
    second = np.einsum("nd,de,ne->n", v, M, v)
    admissible = (lam / bound) * np.sum(v**2, axis=1) <= second
    ratios = np.abs(v @ diff) / np.sqrt(np.where(second > 0, second, np.inf))
    sup = float(ratios[admissible].max()) if admissible.any() else 0.0
    return RatioProbe(concentrability_linear(mdp, teacher, pistar, sigma), sup, int(admissible.sum()), n)


def kappa_linear(bound: float) -> float:
    """Worst case of ``1 / (sigma(z)(1 - sigma(z)))`` over reward gaps ``|z| <= 2B``."""
    if bound < 0:
        raise ValueError("bound must be non-negative")
    return float(np.exp(2 * bound) + np.exp(-2 * bound) + 2.0)


# ---------------------------------------------------------------------------
# lemma probes
# ---------------------------------------------------------------------------


@dataclass
class LemmaReport:
    lhs: np.ndarray
    rhs: np.ndarray
    tol: float
    bounds: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def margin(self) -> np.ndarray:
        return self.rhs - self.lhs

    @property
    def violations(self) -> int:
        return int(np.sum(self.lhs > self.rhs + self.tol))

    @property
    def trials(self) -> int:
        return len(self.lhs)

    def rows(self) -> list[tuple[int, float, float, float, bool]]:
        return [
            (i, float(l), float(r), float(r - l), bool(l > r + self.tol))
            for i, (l, r) in enumerate(zip(self.lhs, self.rhs))
        ]


def _random_instance(rng: np.random.Generator) -> tuple[TokenMdp, Policy, Policy, float, np.ndarray, np.ndarray]:
    V = int(rng.integers(2, 4))
    H = int(rng.integers(1, 4))
    mdp = TokenMdp(
        V, H, prompt_count=int(rng.integers(1, 4)), feature_dim=int(rng.integers(2, 7)),
        gamma=float(rng.choice([0.5, 1.0])), feature_seed=int(rng.integers(2**31)),
    )
    n_states = SoftmaxLinearPolicy.n_state_features(mdp)
    mu0 = SoftmaxLinearPolicy(rng.normal(scale=2.0, size=(n_states, V)))
    mu1 = SoftmaxLinearPolicy(rng.normal(scale=2.0, size=(n_states, V)))
    B = float(rng.uniform(0.1, 3.0))

    def in_ball() -> np.ndarray:
        v = rng.normal(size=mdp.feature_dim)
        return v / np.linalg.norm(v) * B * rng.random() ** (1.0 / mdp.feature_dim)

    return mdp, mu0, mu1, B, in_ball(), in_ball()


def _pair_gaps(mdp: TokenMdp, mu0: Policy, mu1: Policy, theta: np.ndarray, theta_star: np.ndarray):
    """Reward gaps of every (x, tau0, tau1) with its probability weight."""
    F = mdp.feature_matrix
    p0, p1 = trajectory_probs(mdp, mu0), trajectory_probs(mdp, mu1)
    weight = mdp.d0[:, None, None] * p0[:, :, None] * p1[:, None, :]
    r, rs = F @ theta, F @ theta_star
    z = r[:, :, None] - r[:, None, :]
    zs = rs[:, :, None] - rs[:, None, :]
    return weight, z, zs


def l1_tv_sides(mdp: TokenMdp, mu0: Policy, mu1: Policy, theta, theta_star, kappa: float) -> tuple[float, float]:
    weight, z, zs = _pair_gaps(mdp, mu0, mu1, theta, theta_star)
    lhs = float(np.sum(weight * (z - zs) ** 2))
    tv = np.abs(sigmoid(z) - sigmoid(zs))
    return lhs, float(kappa**2 * np.sum(weight * tv**2))


def tv_logexp_sides(mdp: TokenMdp, mu0: Policy, mu1: Policy, theta, theta_star) -> tuple[float, float]:
    weight, z, zs = _pair_gaps(mdp, mu0, mu1, theta, theta_star)
    p, ps = sigmoid(z), sigmoid(zs)
    lhs = float(np.sum(weight * (p - ps) ** 2))
    # E_{o ~ P*} exp(l_r) is the Bhattacharyya coefficient of the two label laws
    bc = np.sqrt(p * ps) + np.sqrt((1 - p) * (1 - ps))
    return lhs, float(-2.0 * np.log(np.sum(weight * bc)))


def lemma_l1_tv_check(
    rng: np.random.Generator, trials: int, samples_per_trial: int = 1, kappa_scale: float = 1.0, tol: float = 1e-9
) -> LemmaReport:
    """Squared reward-gap error vs ``kappa^2`` times squared label TV, both by enumeration.

    ``samples_per_trial`` reward pairs are drawn per random instance.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    lhs, rhs, kappas = [], [], []
    for _ in range(trials):
        mdp, mu0, mu1, B, _, _ = _random_instance(rng)
        kappa = kappa_scale * kappa_linear(B)
        for _ in range(samples_per_trial):
            d = mdp.feature_dim
            th = rng.normal(size=(2, d))
            th = th / np.linalg.norm(th, axis=1, keepdims=True) * B * rng.random((2, 1)) ** (1.0 / d)
            l, r = l1_tv_sides(mdp, mu0, mu1, th[0], th[1], kappa)
            lhs.append(l)
            rhs.append(r)
            kappas.append(kappa)
    return LemmaReport(np.array(lhs), np.array(rhs), tol, np.array(kappas))


def lemma_tv_logexp_check(rng: np.random.Generator, trials: int, tol: float = 1e-9) -> LemmaReport:
    """Expected squared label TV vs ``-2 log E exp(l_r)``, both by enumeration."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    lhs, rhs = [], []
    for _ in range(trials):
        mdp, mu0, mu1, _, th, th_star = _random_instance(rng)
        l, r = tv_logexp_sides(mdp, mu0, mu1, th, th_star)
        lhs.append(l)
        rhs.append(r)
    return LemmaReport(np.array(lhs), np.array(rhs), tol)


# ---------------------------------------------------------------------------
# performance summaries
# ---------------------------------------------------------------------------


def suboptimality(mdp: TokenMdp, rstar, pistar: Policy, student: Policy) -> float:
    return exact_value(mdp, pistar, rstar) - exact_value(mdp, student, rstar)


@dataclass
class RegretCurve:
    per_step: np.ndarray
    cumulative: np.ndarray


def regret_curve(policies: Sequence[Policy], mdp: TokenMdp, rstar, pistar: Policy) -> RegretCurve:
    j_star = exact_value(mdp, pistar, rstar)
    per = np.array([j_star - exact_value(mdp, p, rstar) for p in policies])
    return RegretCurve(per, np.cumsum(per))


@dataclass(frozen=True)
class RateFit:
    x: np.ndarray
    y: np.ndarray
    slope: float
    intercept: float
    residual_rms: float


def rate_fit(points: Sequence[tuple[float, float]] | np.ndarray) -> RateFit:
    """Least-squares line through ``(log x, log y)``."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 3:
        raise ValueError("rate_fit needs at least 3 (x, y) points")
    if np.any(pts <= 0):
        raise NonPositivePoint("rate_fit needs strictly positive x and y")
    lx, ly = np.log(pts[:, 0]), np.log(pts[:, 1])
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(A, ly, rcond=None)
    resid = ly - (slope * lx + intercept)
    return RateFit(pts[:, 0], pts[:, 1], float(slope), float(intercept), float(np.sqrt(np.mean(resid**2))))


@dataclass
class WorstCase:
    value: float
    theta: np.ndarray
    zeta: float
    feasible_restarts: int


def worst_case_gap(
    gap_vec: np.ndarray,
    diffs: np.ndarray,
    labels: np.ndarray,
    bound: float,
    zeta: float,
    rng: np.random.Generator,
    restarts: int = 20,
    theta_mle: np.ndarray | None = None,
) -> WorstCase:
    """``max theta . gap_vec`` over rewards in the ball whose log-likelihood is within ``zeta`` of the best.

    Each restart runs SLSQP from a random point of the ball; the MLE is
    always a feasible fallback, so the value is never below ``theta_mle . gap_vec``.
    """
    gap_vec = np.asarray(gap_vec, dtype=float)
    d = gap_vec.shape[0]
    if theta_mle is None:
        from pbkd.reward_model import maximize_penalized

        theta_mle = maximize_penalized(diffs, labels, bound)[0]
    floor = loglik_arrays(theta_mle, diffs, labels) - zeta
    cons = [
        {"type": "ineq", "fun": lambda t: loglik_arrays(t, diffs, labels) - floor,
         "jac": lambda t: loglik_grad_arrays(t, diffs, labels)},
        {"type": "ineq", "fun": lambda t: bound**2 - t @ t, "jac": lambda t: -2.0 * t},
    ]
    best_val, best = float(theta_mle @ gap_vec), np.asarray(theta_mle, dtype=float)
    feasible = 0
    for _ in range(restarts):
        start = rng.normal(size=d)
        start *= bound * rng.random() ** (1.0 / d) / np.linalg.norm(start)
        res = minimize(lambda t: -(t @ gap_vec), start, jac=lambda t: -gap_vec, method="SLSQP",
                       constraints=cons, options={"maxiter": 500, "ftol": 1e-12})
        t = res.x
        ok = loglik_arrays(t, diffs, labels) >= floor - 1e-7 and t @ t <= bound**2 * (1 + 1e-9)
        if ok:
            feasible += 1
            if t @ gap_vec > best_val:
                best_val, best = float(t @ gap_vec), t
    return WorstCase(best_val, best, zeta, feasible)


def policy_worst_case_gap(
    mdp: TokenMdp,
    teacher: Policy,
    student: Policy,
    dataset: PreferenceDataset,
    bound: float,
    rng: np.random.Generator,
    restarts: int = 20,
    zeta: float | None = None,
) -> WorstCase:
    """Largest teacher-minus-student value over the confidence set built from ``dataset``."""
    diffs, labels = dataset.feature_diffs(mdp), dataset.labels
    if zeta is None:
        zeta = offline_zeta(mdp.feature_dim, bound, len(dataset))
    mle = fit_mle(dataset, mdp, mdp.feature_dim, bound).theta
    gap_vec = feature_expectation(mdp, teacher) - feature_expectation(mdp, student)
    return worst_case_gap(gap_vec, diffs, labels, bound, zeta, rng, restarts, mle)
