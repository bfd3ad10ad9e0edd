import os
import time

import numpy as np
import pytest

from pbkd.seq_mdp import TokenMdp

SESSION_START = time.monotonic()
# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def constant_table(mdp_shape_args: dict, fill) -> np.ndarray:
    """Feature table of the right shape whose entries come from ``fill(h)``."""
    probe = TokenMdp(**mdp_shape_args)
    P, C, H, V, d = probe.table_shape
    table = np.zeros((P, C, H, V, d))
    for h in range(H):
        table[:, :, h, :, :] = fill(h)
    return table


def unit_ball(rng: np.random.Generator, d: int, radius: float) -> np.ndarray:
    v = rng.normal(size=d)
    return v * radius * rng.random() ** (1.0 / d) / np.linalg.norm(v)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def tiny_mdp():
    return TokenMdp(3, 3, prompt_count=2, feature_dim=5, feature_seed=7)


def _jobs() -> int:
    return min(8, os.cpu_count() or 1)


@pytest.fixture(scope="session")
def offline_rate_sweep(tmp_path_factory):
    """Seed-averaged suboptimality of offline PbKD over the dataset-size ladder."""
    from pbkd.harness import presets, runner

    out = tmp_path_factory.mktemp("offline-rate")
    start = time.monotonic()
    result = runner.sweep(presets.reference_offline(), "N", presets.OFFLINE_LADDER, 5, out, _jobs())
    result.elapsed = time.monotonic() - start
    return result


@pytest.fixture(scope="session")
def online_regret_sweep(tmp_path_factory):
    """Cumulative regret of online PbKD over the iteration ladder."""
    from pbkd.harness import presets, runner

    out = tmp_path_factory.mktemp("online-regret")
    start = time.monotonic()
    result = runner.sweep(presets.reference_online(), "T", presets.REGRET_LADDER, 5, out, _jobs())
    result.elapsed = time.monotonic() - start
    return result
