"""Shared fixtures and the session-wide EM monotonicity registry.

Every EM run in the package reports its log-likelihood trace through
``fmsnc.monitor``; the registry below records all of them and fails the
session if any trace decreases by more than 1e-8 relative.
"""

import numpy as np
import pytest

from fmsnc import monitor
from fmsnc.distributions import EsnParams
from fmsnc.mixture import MixtureModel


class TraceRegistry:
    def __init__(self):
        self.runs = 0
        self.violations = []

    def __call__(self, trace, label):
        self.runs += 1
        bad = monitor.monotone_violations(trace, rel=1e-8)
        if bad:
            k = bad[0]
            self.violations.append((label, k, trace[k], trace[k + 1]))


REGISTRY = TraceRegistry()
monitor.add_listener(REGISTRY)


def pytest_collection_modifyitems(session, config, items):
    # checks that read the registry run after every other test
    items.sort(key=lambda item: item.get_closest_marker("registry") is not None)


def pytest_sessionfinish(session, exitstatus):
    if REGISTRY.violations:
        session.exitstatus = 1


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    tr = terminalreporter
    tr.write_line(f"EM monotonicity registry: {REGISTRY.runs} runs, "
                  f"{len(REGISTRY.violations)} violations")
    for label, k, a, b in REGISTRY.violations[:20]:
        tr.write_line(f"  {label}: step {k}: {a!r} -> {b!r}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_spd(rng, p, jitter=0.3):
    a = rng.normal(size=(p, p))
    return a @ a.T + jitter * np.eye(p)


def random_params(rng, p, skew=True, tau=0.0):
    lam = rng.normal(size=p) * 2 if skew else np.zeros(p)
    return EsnParams(rng.normal(size=p), random_spd(rng, p), lam, tau)


# Two-component truths used across the simulation tests.
CENSORING_TRUTH = MixtureModel([0.65, 0.35], [
    EsnParams([-3, -4], [[3, 1], [1, 4.5]], [-2, 2]),
    EsnParams([2, 2], [[2, 1], [1, 3.5]], [-3, 4]),
])
MISSING_TRUTH = MixtureModel([0.65, 0.35], [
    EsnParams([-5, -4], [[3, 1], [1, 4.5]], [-2, 3]),
    EsnParams([2, 3], [[2, 1], [1, 3.5]], [-2, 3]),
])
SELECTION_TRUTH = MixtureModel([0.65, 0.35], [
    EsnParams([2, 2], [[1.5, 0], [0, 1.5]], [-5, 10]),
    EsnParams([-2, -1], [[1.5, 0], [0, 1.5]], [-5, 10]),
])
CLUSTER_TRUTH = MixtureModel([0.7, 0.3], [
    EsnParams([2, 3], [[3, 1], [1, 4]], [2, 4]),
    EsnParams([5, 7], [[2, 1], [1, 2]], [3, 5]),
])
