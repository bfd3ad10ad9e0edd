"""Reference experiments: offline rate, online regret, method ordering and robustness."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Any

import numpy as np

from pbkd.diagnostics import policy_worst_case_gap
from pbkd.harness.runner import stream
from pbkd.pbkd_offline import OfflineConfig, solve_offline
from pbkd.policies import SoftmaxLinearPolicy, behavior_cloning_fit, teacher_policy
from pbkd.preference_data import gen_offline
from pbkd.reward_model import LinearReward
from pbkd.seq_mdp import TokenMdp, sample_actions, sample_prompts

OFFLINE_LADDER = (250, 500, 1000, 2000, 4000, 8000, 16000)
REGRET_LADDER = (12, 25, 50, 100, 200)
ORDERING_BASE = 10
ORDERING_MULTIPLES = (1, 3, 5)

# A 3-token, 3-step task with 4 prompts and 8 features; the teacher is
# optimal for a perturbed reward, so it is itself suboptimal under the oracle.
_TASK = {
    "schema": "pbkd-experiment/1",
    "mdp": {"vocab_size": 3, "horizon": 3, "prompt_count": 4, "feature_dim": 8,
            "gamma": 1.0, "context_len": 2, "feature_seed": 1},
    "oracle": {"seed": 123, "norm": 1.8, "bound": 2.0},
    "teacher": {"perturb": 0.8, "norm": 1.8},
    "dataset": {"kind": "offline", "n": 1000,
                "mu0": {"kind": "teacher", "temperature": 2.0}, "mu1": {"kind": "uniform"}},
}

_ONLINE_PARAMS = {"labeling": "oracle", "policy_lr": 4.0, "ridge": 1.0, "alpha": 0.1}


def reference_offline(n: int = 1000, seed: int = 0) -> dict[str, Any]:
    cfg = copy.deepcopy(_TASK)
    cfg.update(algorithm="pbkd-offline", seed=seed, params={"beta": 1.0, "rounds": 200})
    cfg["dataset"]["n"] = n
    return cfg


def reference_online(iterations: int = 200, seed: int = 0) -> dict[str, Any]:
    """Online task whose teacher is the oracle optimum; the student starts from a lightly fitted BC policy."""
    cfg = copy.deepcopy(_TASK)
    cfg["teacher"] = {"perturb": 0.0}
    cfg["dataset"] = {"kind": "none"}
    cfg.update(
        algorithm="pbkd-online",
        seed=seed,
        student={"init": "bc", "demos": 50, "l2": 0.05},
        params={"iterations": iterations, **_ONLINE_PARAMS},
    )
    return cfg


def ordering_configs(seed: int = 0) -> list[dict[str, Any]]:
    """BC, offline, and online warm-started from offline at growing iteration budgets."""
    bc = copy.deepcopy(_TASK)
    bc.update(algorithm="bc", label="bc", seed=seed)
    off = reference_offline(1000, seed)
    off["label"] = "pbkd-offline"
    out = [bc, off]
    for k in ORDERING_MULTIPLES:
        cfg = copy.deepcopy(_TASK)
        cfg.update(
            algorithm="pbkd-online",
            label=f"pbkd-online-x{k}",
            seed=seed,
            params={"iterations": ORDERING_BASE * k, "warm_start": {"beta": 1.0, "rounds": 200}, **_ONLINE_PARAMS},
        )
        out.append(cfg)
    return out


ORDERING_LABELS = ["bc", "pbkd-offline"] + [f"pbkd-online-x{k}" for k in ORDERING_MULTIPLES]


@dataclass
class RobustnessTrial:
    instance: int
    bc_worst: float
    pbkd_worst: float


def robustness_trial(
    instance: int,
    n_pref: int = 500,
    demos: int = 20,
    rounds: int = 150,
    restarts: int = 20,
) -> RobustnessTrial:
    """Worst-case confidence-set gap of BC and offline PbKD on one random instance.

    The teacher is a softmax over oracle Q-values; preferences compare a
    softened teacher with uniform rollouts; BC sees ``demos`` teacher
    trajectories. PbKD calibrates its multiplier to the same confidence set
    the evaluation uses and returns its best round.
    """
    rng = stream(instance, "robustness")
    mdp = TokenMdp(3, 2, prompt_count=2, feature_dim=6, feature_seed=int(rng.integers(2**31)))
    theta = rng.normal(size=6)
    theta *= 1.5 / np.linalg.norm(theta)
    rstar = LinearReward(theta, 2.0)
    teacher = teacher_policy(mdp, rstar, temperature=0.5)
    mu0 = teacher_policy(mdp, rstar, temperature=2.0)
    data = gen_offline(mdp, mu0, SoftmaxLinearPolicy.uniform(mdp), rstar, n_pref, rng)
    xs = sample_prompts(mdp, demos, rng)
    bc = behavior_cloning_fit(mdp, (xs, sample_actions(mdp, teacher, xs, rng)), SoftmaxLinearPolicy.uniform(mdp)).policy
    pbkd = solve_offline(mdp, teacher, data, OfflineConfig(rounds=rounds, beta_mode="calibrated", output="best")).policy
    wb = policy_worst_case_gap(mdp, teacher, bc, data, 2.0, stream(instance, "restarts-bc"), restarts)
    wp = policy_worst_case_gap(mdp, teacher, pbkd, data, 2.0, stream(instance, "restarts-pbkd"), restarts)
    return RobustnessTrial(instance, wb.value, wp.value)
