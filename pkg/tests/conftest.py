import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from hiercast.hierarchy import build_hierarchy

torch.set_num_threads(1)

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def tree3():
    return build_hierarchy([(1, 2, 1.0), (1, 3, 1.0)])


@pytest.fixture
def tree5():
    return build_hierarchy([(1, 2, 0.5), (1, 3, 0.5), (2, 4, 1.0), (2, 5, 1.0)])


def random_tree(rng: np.random.Generator, n: int, weights: str = "random"):
    """Random recursive tree on ``n`` nodes (parent of k drawn from 1..k-1)."""
    edges = []
    for k in range(2, n + 1):
        p = int(rng.integers(1, k))
        w = float(rng.uniform(0.2, 2.0)) if weights == "random" else 1.0
        edges.append((p, k, w))
    return build_hierarchy(edges)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
