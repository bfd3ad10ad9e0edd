"""Seeded runs, sweeps and comparisons with on-disk artifacts.

A run directory holds::

    config.yaml    resolved config (re-running it reproduces trace.csv byte for byte)
    trace.csv      one row per iteration, fixed column order, floats in repr form
    policy.json    final student policy
    reward.json    final adversary parameters (null for baselines without one)
    dataset.jsonl  preference data the run ended with, one comparison per line
    manifest.json  run id, seed, package version, build id, summary metrics
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

import pbkd
from pbkd.adversarial import Trace
from pbkd.diagnostics import RateFit, rate_fit
from pbkd.errors import ConfigInvalid, IncompatibleRuns
from pbkd.harness import config as cfgmod
from pbkd.mm_pbkd import MmConfig, moment_critic, solve_mm
from pbkd.pbkd_offline import OfflineConfig, solve_offline
from pbkd.pbkd_online import OnlineConfig, run_iterations, run_online
from pbkd.policies import (
    BCOptions,
    Policy,
    SoftmaxLinearPolicy,
    behavior_cloning_fit,
    best_of_n,
    dp_optimal_policy,
    dumps_policy,
    exact_value,
    teacher_policy,
)
from pbkd.preference_data import PreferenceDataset, gen_offline
from pbkd.reward_model import LinearReward, fit_mle
from pbkd.seq_mdp import TokenMdp, sample_actions, sample_prompts

TRACE = "trace.csv"
MANIFEST = "manifest.json"


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent Philox generator for a named consumer of the master seed."""
    ss = np.random.SeedSequence(seed, spawn_key=(zlib.crc32(name.encode()),))
    return np.random.Generator(np.random.Philox(ss))


def build_id() -> str:
    """Hash of the installed package sources."""
    root = Path(pbkd.__file__).parent
    h = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        h.update(path.relative_to(root).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:12]


# ---------------------------------------------------------------------------
# task construction
# ---------------------------------------------------------------------------


@dataclass
class Task:
    mdp: TokenMdp
    rstar: LinearReward
    theta_teacher: np.ndarray
    teacher: Policy
    pistar: Policy
    j_star: float
    j_teacher: float


def build_task(cfg: dict[str, Any]) -> Task:
    mdp = TokenMdp(**cfg["mdp"])
    d, oracle, tspec = mdp.feature_dim, cfg["oracle"], cfg["teacher"]
    rng = np.random.default_rng(oracle["seed"])
    if oracle["theta"] is not None:
        theta = np.array(oracle["theta"], dtype=float)
        if np.linalg.norm(theta) > oracle["bound"] + 1e-12:
            raise ConfigInvalid("oracle.theta", "norm exceeds oracle.bound")
    else:
        theta = rng.normal(size=d)
        theta *= oracle["norm"] / np.linalg.norm(theta)
    rstar = LinearReward(theta, oracle["bound"])
    if tspec["theta"] is not None:
        theta_e = np.array(tspec["theta"], dtype=float)
    else:
        theta_e = theta.copy()
        if tspec["perturb"] > 0:
            theta_e = theta_e + tspec["perturb"] * rng.normal(size=d)
    if tspec["norm"] is not None:
        theta_e *= tspec["norm"] / np.linalg.norm(theta_e)
    elif tspec["perturb"] > 0 and tspec["theta"] is None:
        theta_e *= np.linalg.norm(theta) / np.linalg.norm(theta_e)
    teacher = teacher_policy(mdp, theta_e, tspec["temperature"])
    pistar = dp_optimal_policy(mdp, rstar)
    return Task(mdp, rstar, theta_e, teacher, pistar, exact_value(mdp, pistar, rstar), exact_value(mdp, teacher, rstar))


def _annotator(task: Task, spec: dict[str, Any]) -> Policy:
    if spec["kind"] == "uniform":
        return SoftmaxLinearPolicy.uniform(task.mdp)
    if spec["temperature"] is None:
        return task.teacher
    return teacher_policy(task.mdp, task.theta_teacher, spec["temperature"])


def build_dataset(cfg: dict[str, Any], task: Task) -> PreferenceDataset:
    ds = cfg["dataset"]
    if ds["kind"] == "none":
        return PreferenceDataset.empty(task.mdp.horizon)
    if ds["kind"] == "file":
        return PreferenceDataset.load(ds["path"], task.mdp.horizon)
    mu0, mu1 = _annotator(task, ds["mu0"]), _annotator(task, ds["mu1"])
    return gen_offline(task.mdp, mu0, mu1, task.rstar, ds["n"], stream(cfg["seed"], "data"), seeds=(cfg["seed"],))


def teacher_demos(cfg: dict[str, Any], task: Task) -> tuple[np.ndarray, np.ndarray]:
    rng = stream(cfg["seed"], "demos")
    xs = sample_prompts(task.mdp, cfg["student"]["demos"], rng)
    return xs, sample_actions(task.mdp, task.teacher, xs, rng)


def build_student(cfg: dict[str, Any], task: Task) -> SoftmaxLinearPolicy:
    init = SoftmaxLinearPolicy.uniform(task.mdp)
    if cfg["student"]["init"] == "uniform":
        return init
    return behavior_cloning_fit(task.mdp, teacher_demos(cfg, task), init, BCOptions(l2=cfg["student"]["l2"])).policy


# ---------------------------------------------------------------------------
# single run
# ---------------------------------------------------------------------------


@dataclass
class RunArtifact:
    directory: Path
    config: dict[str, Any]
    trace: Trace
    policy: Policy
    reward: dict[str, Any] | None
    dataset: PreferenceDataset
    metrics: dict[str, float]
    manifest: dict[str, Any]


def _params(cls, params: dict[str, Any]):
    names = {f for f in cls.__dataclass_fields__}
    return cls(**{k: v for k, v in params.items() if k in names})


def _dispatch(cfg: dict[str, Any], task: Task, dataset: PreferenceDataset):
    """Returns ``(policy, trace, reward record, final dataset, extra metrics)``."""
    algo, params, seed = cfg["algorithm"], cfg["params"], cfg["seed"]
    mdp, rstar, teacher = task.mdp, task.rstar, task.teacher
    bound = cfg["oracle"]["bound"]

    if algo == "bc":
        opts = BCOptions(epochs=params["epochs"], lr=params["lr"], l2=params["l2"])
        fit = behavior_cloning_fit(mdp, teacher_demos(cfg, task), SoftmaxLinearPolicy.uniform(mdp), opts)
        trace = Trace(["epoch", "loss"])
        for i, loss in enumerate(fit.losses):
            trace.add(epoch=i, loss=loss)
        return fit.policy, trace, None, dataset, {}

    if algo == "best-of-n":
        base = build_student(cfg, task)
        rm = fit_mle(dataset, mdp, mdp.feature_dim, bound).reward
        rng = stream(seed, "eval")
        trace = Trace(["sample", "prompt", "rm_score", "rstar_reward"])
        prompts = sample_prompts(mdp, params["eval_samples"], rng)
        total = 0.0
        for i, x in enumerate(prompts):
            traj = best_of_n(mdp, base, rm, int(x), params["n"], rng)
            r_true = float(traj.features @ rstar.theta)
            total += r_true
            trace.add(sample=i, prompt=int(x), rm_score=float(traj.features @ rm.theta), rstar_reward=r_true)
        reward = {"kind": "linear", "theta": rm.theta.tolist(), "bound": bound}
        return base, trace, reward, dataset, {"j_rstar": total / len(prompts)}

    student = build_student(cfg, task)
    if algo in ("pbkd-offline", "mm-offline"):
        oc = _params(OfflineConfig, params)
        rng = stream(seed, "optimization")
        if algo == "pbkd-offline":
            res = solve_offline(mdp, teacher, dataset, oc, student, rstar, rng)
            return res.policy, res.trace, {"kind": "linear", "theta": res.theta.tolist(), "bound": oc.bound}, dataset, {}
        res = solve_mm(mdp, teacher, dataset, "offline", MmConfig("offline", offline=oc), student, rstar, rng)
        return res.policy, res.trace, {"kind": "q", "w": res.q.w.tolist(), "bound": oc.bound}, dataset, {}

    on = _params(OnlineConfig, params)
    rng = stream(seed, "rollout")
    mm = algo == "mm-online"
    critic = moment_critic(mdp, teacher) if mm else None
    theta0 = None
    initial = dataset if len(dataset) else None
    if params["warm_start"] is not None:
        oc = _params(OfflineConfig, params["warm_start"])
        warm_rng = stream(seed, "optimization")
        if mm:
            warm = solve_mm(mdp, teacher, dataset, "offline", MmConfig("offline", offline=oc), student, rstar, warm_rng)
            student, theta0 = warm.policy, warm.q.w
        else:
            warm = solve_offline(mdp, teacher, dataset, oc, student, rstar, warm_rng)
            student, theta0 = warm.policy, warm.theta
    if mm:
        out = run_iterations(critic, student, on, rng, rstar, initial, theta0)
        reward = {"kind": "q", "w": out.theta.tolist(), "bound": on.bound}
    else:
        out = run_online(mdp, teacher, student, on, rng, rstar, initial, theta0)
        reward = {"kind": "linear", "theta": out.theta.tolist(), "bound": on.bound}
    extra = {"regret_cumulative": float(out.trace.column("regret_cumulative")[-1])}
    return out.policy, out.trace, reward, out.dataset, extra


def run(cfg: dict[str, Any], out: str | Path | None = None) -> RunArtifact:
    """Validate, execute and persist one run under ``<root>/run-<id>/``."""
    cfg = cfgmod.validate(cfg)
    task = build_task(cfg)
    dataset = build_dataset(cfg, task)
    policy, trace, reward, final_data, extra = _dispatch(cfg, task, dataset)

    metrics = {"j_star": task.j_star, "j_teacher": task.j_teacher}
    j = extra.pop("j_rstar", None)
    metrics["j_rstar"] = exact_value(task.mdp, policy, task.rstar) if j is None else j
    metrics["subopt"] = task.j_star - metrics["j_rstar"]
    metrics.update(extra)
    if not all(np.isfinite(v) for v in metrics.values()):
        from pbkd.errors import NonFinite

        raise NonFinite(f"non-finite summary metric in {metrics}")

    rid = cfgmod.run_id(cfg)
    directory = cfgmod.output_root(cfg, out) / f"run-{rid}"
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.yaml").write_text(cfgmod.dumps(cfg))
    (directory / TRACE).write_text(trace.to_csv())
    (directory / "policy.json").write_text(dumps_policy(policy))
    (directory / "reward.json").write_text(json.dumps(reward))
    (directory / "dataset.jsonl").write_text(final_data.to_jsonl())
    manifest = {
        "run_id": rid,
        "label": cfg["label"] or cfg["algorithm"],
        "algorithm": cfg["algorithm"],
        "seed": cfg["seed"],
        "version": pbkd.__version__,
        "build_id": build_id(),
        "numpy": np.__version__,
        "mdp": task.mdp.to_dict(),
        "oracle_theta": task.rstar.theta.tolist(),
        "metrics": metrics,
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return RunArtifact(directory, cfg, trace, policy, reward, final_data, metrics, manifest)


def rerun(directory: str | Path, out: str | Path | None = None) -> RunArtifact:
    """Run again from a run directory's config snapshot."""
    return run(cfgmod.load(Path(directory) / "config.yaml"), out)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

AXES = {"N": ("dataset__n", "subopt"), "T": ("params__iterations", "regret_cumulative")}
QUANTITY_NAMES = {"subopt": "subopt", "regret_cumulative": "regret"}


@dataclass
class SweepResult:
    axis: str
    quantity: str
    values: list[int]
    seeds: list[int]
    table: np.ndarray  # (values, seeds)
    directory: Path
    run_dirs: list[Path] = field(default_factory=list)
    fit: RateFit | None = None

    @property
    def means(self) -> np.ndarray:
        return self.table.mean(axis=1)

    @property
    def ses(self) -> np.ndarray:
        k = self.table.shape[1]
        return self.table.std(axis=1, ddof=1) / np.sqrt(k) if k > 1 else np.zeros(len(self.values))


def _cell(args: tuple[dict[str, Any], str]) -> tuple[str | None, dict[str, float] | None, str | None]:
    cfg, out = args
    try:
        art = run(cfg, out)
    except Exception as exc:  # reported through the failure manifest
        return None, None, f"{type(exc).__name__}: {exc}"
    return str(art.directory), art.metrics, None


def summary_csv(result: SweepResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["quantity", result.axis, "mean", "se", "n_seeds"] + [f"seed_{s}" for s in result.seeds])
    for v, m, se, row in zip(result.values, result.means, result.ses, result.table):
        w.writerow([QUANTITY_NAMES[result.quantity], v, repr(float(m)), repr(float(se)), len(result.seeds)]
                   + [repr(float(x)) for x in row])
    return buf.getvalue()


def sweep(
    template: dict[str, Any],
    axis: str,
    values: Sequence[int],
    seeds: int | Sequence[int],
    out: str | Path | None = None,
    jobs: int = 1,
) -> SweepResult:
    """Run every (value, seed) cell, aggregate seed means and fit a log-log rate."""
    if axis not in AXES:
        raise ConfigInvalid("axis", "expected N or T")
    values = [int(v) for v in values]
    if len(values) < 3:
        raise ConfigInvalid("values", "a sweep needs at least 3 values")
    if any(b <= a for a, b in zip(values, values[1:])):
        raise ConfigInvalid("values", "values must be strictly increasing")
    seed_list = list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds]
    if not seed_list:
        raise ConfigInvalid("seeds", "need at least one seed")
    template = cfgmod.validate(template)
    if axis == "T" and template["algorithm"] not in ("pbkd-online", "mm-online"):
        raise ConfigInvalid("axis", "a T sweep needs an online algorithm")
    key, quantity = AXES[axis]

    tag = hashlib.sha256(cfgmod.canonical({"t": template, "axis": axis, "v": values, "s": seed_list}).encode()).hexdigest()[:12]
    directory = cfgmod.output_root(template, out) / f"sweep-{tag}"
    run_root = str(directory / "runs")
    cells = [(v, s) for v in values for s in seed_list]
    jobs_args = [(cfgmod.with_overrides(template, seed=template["seed"] + s, **{key: v}), run_root) for v, s in cells]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_cell, jobs_args))
    else:
        results = [_cell(a) for a in jobs_args]

    directory.mkdir(parents=True, exist_ok=True)
    failures = [{"value": v, "seed": s, "error": err} for (v, s), (_, _, err) in zip(cells, results) if err]
    table = np.full((len(values), len(seed_list)), np.nan)
    run_dirs = []
    for i, ((v, s), (rdir, metrics, _)) in enumerate(zip(cells, results)):
        if metrics is not None:
            table[i // len(seed_list), i % len(seed_list)] = metrics[quantity]
            run_dirs.append(Path(rdir))
    result = SweepResult(axis, quantity, values, seed_list, table, directory, run_dirs)
    if failures:
        (directory / "failures.json").write_text(json.dumps(failures, indent=2))
        (directory / "summary.partial.csv").write_text(summary_csv(result))
        raise RuntimeError(f"{len(failures)} sweep cell(s) failed; first: {failures[0]['error']}")
    (directory / "summary.csv").write_text(summary_csv(result))
    result.fit = rate_fit(np.stack([values, result.means], axis=1))
    (directory / "fit.json").write_text(json.dumps(
        {"axis": axis, "quantity": QUANTITY_NAMES[quantity], "slope": result.fit.slope,
         "intercept": result.fit.intercept, "residual_rms": result.fit.residual_rms}, indent=2))
    return result


def read_summary(path: str | Path) -> tuple[str, np.ndarray]:
    """``(quantity, points)`` from a sweep summary table."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:1] != ["quantity"]:
        raise ConfigInvalid("input", "not a sweep summary table")
    body = rows[1:]
    quantity = body[0][0] if body else ""
    pts = np.array([[float(r[1]), float(r[2])] for r in body])
    return quantity, pts


# ---------------------------------------------------------------------------
# comparisons
# ---------------------------------------------------------------------------

METRICS = {"j_rstar": "j_rstar", "regret": "regret_cumulative"}


@dataclass
class Gap:
    lower: str
    upper: str
    mean: float
    se: float

    @property
    def exceeds_se(self) -> bool:
        return self.mean > self.se


@dataclass
class CompareReport:
    metric: str
    labels: list[str]
    means: dict[str, float]
    per_seed: dict[str, dict[int, float]]
    ordering: list[str]
    gaps: list[Gap]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lower", "upper", "gap", "paired_se", "exceeds_se"])
        for g in self.gaps:
            w.writerow([g.lower, g.upper, repr(g.mean), repr(g.se), int(g.exceeds_se)])
        return buf.getvalue()


def load_manifest(directory: str | Path) -> dict[str, Any]:
    return json.loads((Path(directory) / MANIFEST).read_text())


def paired_gap(a: dict[int, float], b: dict[int, float]) -> tuple[float, float]:
    """Mean and standard error of ``b - a`` over shared seeds."""
    shared = sorted(set(a) & set(b))
    if not shared:
        raise IncompatibleRuns("no shared seeds between the compared methods")
    diff = np.array([b[s] - a[s] for s in shared])
    se = float(diff.std(ddof=1) / np.sqrt(len(diff))) if len(diff) > 1 else 0.0
    return float(diff.mean()), se


def compare(run_dirs: Sequence[str | Path], metric: str = "j_rstar") -> CompareReport:
    """Seed-averaged metric per label, in ascending order, with paired gaps between neighbours."""
    if metric not in METRICS:
        raise ConfigInvalid("metric", f"expected one of {', '.join(METRICS)}")
    manifests = [load_manifest(d) for d in run_dirs]
    if not manifests:
        raise IncompatibleRuns("nothing to compare")
    ref = manifests[0]
    for m in manifests[1:]:
        if m["mdp"] != ref["mdp"]:
            raise IncompatibleRuns(f"run {m['run_id']} uses a different MDP than run {ref['run_id']}")
        if not np.allclose(m["oracle_theta"], ref["oracle_theta"], rtol=0, atol=0):
            raise IncompatibleRuns(f"run {m['run_id']} uses a different oracle reward than run {ref['run_id']}")
    key = METRICS[metric]
    per_seed: dict[str, dict[int, float]] = {}
    for m in manifests:
        if key not in m["metrics"]:
            raise IncompatibleRuns(f"run {m['run_id']} has no {metric} metric")
        per_seed.setdefault(m["label"], {})[m["seed"]] = m["metrics"][key]
    labels = list(per_seed)
    means = {k: float(np.mean(list(v.values()))) for k, v in per_seed.items()}
    ordering = sorted(labels, key=lambda k: means[k])
    gaps = []
    for lo, hi in zip(ordering, ordering[1:]):
        g, se = paired_gap(per_seed[lo], per_seed[hi])
        gaps.append(Gap(lo, hi, g, se))
    return CompareReport(metric, labels, means, per_seed, ordering, gaps)
