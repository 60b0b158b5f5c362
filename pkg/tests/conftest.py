import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pacoh_lab.environments import TaskDataset
from pacoh_lab.numerics import RngStream

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=15, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return RngStream(1234)


def random_spd(rng, n, ridge=0.5):
    A = rng.normal(size=(n, n))
    return A @ A.T + ridge * np.eye(n)


@pytest.fixture
def linear_task(rng):
    """Small noisy linear-regression task with its true weights."""
    w = np.array([0.7, -0.3])
    X = rng.normal(size=(6, 2))
    y = X @ w + 0.2 * rng.normal(size=6)
    return TaskDataset(X, y, task_id=3, meta={"w_star": w})


@pytest.fixture
def sine_tasks(rng):
    tasks = []
    for i in range(3):
        x = rng.uniform(-2, 2, size=(5, 1))
        tasks.append(TaskDataset(x, np.sin(x[:, 0] + 0.3 * i), task_id=i))
    return tasks


ACCEPTANCE_RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_RESULTS] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    rows = config.stash.get(ACCEPTANCE_RESULTS, [])
    if rows:
        terminalreporter.section("acceptance criteria")
        for line in sorted(rows, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one acceptance line ``criterion k: PASS|FAIL detail`` and assert the outcome."""

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title} | {detail}"
        request.config.stash[ACCEPTANCE_RESULTS].append(line)
        print(line)
        assert ok, line

    return record
