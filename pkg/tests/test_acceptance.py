"""End-to-end acceptance criteria, one test each, with a pass/fail line per criterion."""

import csv
import time
from contextlib import contextmanager

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, SESSION_START
from pbkd.diagnostics import lemma_l1_tv_check, lemma_tv_logexp_check
from pbkd.harness import checks, presets, runner
from pbkd.harness import config as cfgmod
from pbkd.reward_model import fit_mle

pytestmark = pytest.mark.acceptance


@contextmanager
def criterion(number: int, title: str):
    """Records ``PASS``/``FAIL`` for the criterion along with whatever the body puts in ``notes``."""
    notes: dict[str, object] = {}
    start = time.monotonic()
    status = "FAIL"
    try:
        yield notes
        status = "PASS"
    finally:
        detail = ", ".join(f"{k}={v}" for k, v in notes.items())
        line = f"[{status}] C{number:<2} {title}: {detail} ({time.monotonic() - start:.1f}s)"
        ACCEPTANCE_LINES.append(line)
        print(line)


def fmt(x: float) -> str:
    return f"{x:.4g}"


@pytest.fixture(scope="module")
def ordering_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("ordering")
    return [runner.run(cfg, out) for seed in range(5) for cfg in presets.ordering_configs(seed)]


def test_c1_performance_difference_identity():
    with criterion(1, "PDL identity on 100 tiny MDPs") as notes:
        start = time.monotonic()
        errs = checks.pdl_errors(np.random.default_rng(0), 100)
        elapsed = time.monotonic() - start
        notes.update(max_error=fmt(errs.max()), seconds=fmt(elapsed))
        assert errs.max() <= 1e-8
        assert elapsed < 10


def test_c2_bellman_inversion():
    with criterion(2, "Bellman inversion of teacher Q") as notes:
        errs = checks.bellman_errors(np.random.default_rng(0), 100)
        notes.update(max_error=fmt(errs.max()))
        assert errs.max() <= 1e-10


def test_c3_lemma_checks():
    with criterion(3, "reward-gap/TV and TV/log-exp inequalities") as notes:
        start = time.monotonic()
        l1 = lemma_l1_tv_check(np.random.default_rng(0), 1000, tol=1e-9)
        tv = lemma_tv_logexp_check(np.random.default_rng(1), 1000, tol=1e-9)
        elapsed = time.monotonic() - start
        notes.update(l1tv_violations=l1.violations, tvlog_violations=tv.violations, trials=l1.trials, seconds=fmt(elapsed))
        assert l1.trials == tv.trials == 1000
        assert l1.violations == 0 and tv.violations == 0
        assert elapsed < 60


def test_c4_mle_consistency():
    with criterion(4, "MLE cosine on 20000 preferences") as notes:
        start = time.monotonic()
        cosines = []
        for seed in range(5):
            cfg = cfgmod.validate(presets.reference_offline(20_000, seed))
            task = runner.build_task(cfg)
            data = runner.build_dataset(cfg, task)
            theta = fit_mle(data, task.mdp, task.mdp.feature_dim, cfg["oracle"]["bound"]).theta
            truth = task.rstar.theta
            cosines.append(float(theta @ truth / (np.linalg.norm(theta) * np.linalg.norm(truth))))
        elapsed = time.monotonic() - start
        notes.update(min_cosine=fmt(min(cosines)), seconds=fmt(elapsed))
        assert task.mdp.feature_dim == 8 and cfg["oracle"]["bound"] == 2.0
        assert min(cosines) >= 0.95
        assert elapsed < 30


def test_c5_offline_rate(offline_rate_sweep):
    with criterion(5, "offline suboptimality-vs-N slope") as notes:
        res = offline_rate_sweep
        notes.update(slope=fmt(res.fit.slope), means=[round(float(m), 4) for m in res.means], seconds=fmt(res.elapsed))
        assert list(res.values) == list(presets.OFFLINE_LADDER) and len(res.seeds) == 5
        assert -0.8 <= res.fit.slope <= -0.2
        assert res.elapsed < 15 * 60


def per_iteration_regret(run_dir):
    j_star = runner.load_manifest(run_dir)["metrics"]["j_star"]
    with open(run_dir / runner.TRACE, newline="") as fh:
        return np.array([j_star - float(row["J_student_rstar"]) for row in csv.DictReader(fh)])


def test_c6_online_regret(online_regret_sweep):
    with criterion(6, "online cumulative-regret slope and per-iteration trend") as notes:
        res = online_regret_sweep
        longest = max(res.values)
        curves = [per_iteration_regret(d) for d in res.run_dirs
                  if cfgmod.load(d / "config.yaml")["params"]["iterations"] == longest]
        mean_curve = np.mean(curves, axis=0)
        increases = int(np.sum(np.diff(mean_curve) > 0))
        notes.update(slope=fmt(res.fit.slope), seeds=len(curves), increases=increases, seconds=fmt(res.elapsed))
        assert longest == 200 and len(curves) == 5
        assert 0.4 <= res.fit.slope <= 0.8
        assert increases == 0
        assert res.elapsed < 15 * 60


def test_c7_method_ordering(ordering_runs):
    with criterion(7, "bc <= offline <= online x1 <= x3 <= x5") as notes:
        report = runner.compare([a.directory for a in ordering_runs], "j_rstar")
        means = [report.means[label] for label in presets.ORDERING_LABELS]
        gaps = np.diff(means)
        notes.update(**{label: fmt(m) for label, m in zip(presets.ORDERING_LABELS, means)})
        assert all(len(report.per_seed[label]) == 5 for label in presets.ORDERING_LABELS)
        assert np.all(gaps >= 0), gaps


def test_c8_gradient_checks():
    with criterion(8, "analytic vs finite-difference gradients") as notes:
        clipped = checks.clipped_gradient_errors(np.random.default_rng(0), 50)
        mle = checks.mle_gradient_errors(np.random.default_rng(1), 50)
        step = checks.reward_step_gradient_errors(np.random.default_rng(2), 50)
        notes.update(clipped=fmt(clipped.max()), mle=fmt(mle.max()), reward_step=fmt(step.max()))
        assert clipped.max() <= 1e-4
        assert mle.max() <= 1e-6
        assert step.max() <= 1e-4


def test_c9_robustness():
    with criterion(9, "offline PbKD worst-case gap <= BC's") as notes:
        trials = [presets.robustness_trial(i) for i in range(50)]
        wins = sum(t.pbkd_worst <= t.bc_worst for t in trials)
        notes.update(wins=f"{wins}/50")
        assert wins >= 40


def test_c10_determinism_and_budget(tmp_path, offline_rate_sweep, online_regret_sweep, ordering_runs):
    with criterion(10, "re-runs are byte-identical; suite under 45 min") as notes:
        sources = [offline_rate_sweep.run_dirs[0], online_regret_sweep.run_dirs[-1]]
        sources += [a.directory for a in ordering_runs[:5]]
        identical = 0
        for i, src in enumerate(sources):
            again = runner.rerun(src, tmp_path / str(i))
            identical += (again.directory / runner.TRACE).read_bytes() == (src / runner.TRACE).read_bytes()
        total = time.monotonic() - SESSION_START
        notes.update(identical=f"{identical}/{len(sources)}", session_minutes=fmt(total / 60))
        assert identical == len(sources)
        assert total < 45 * 60
