"""Session-scoped trained networks shared by the neural and acceptance tests.

Training runs once per pytest session with the shipped defaults; the fixtures
also record wall-clock so the acceptance suite can assert the budget.
"""

import time

import pytest

from btarena import neural


@pytest.fixture(scope="session")
def trained_nav():
    """(params, train_seconds) for the default move_to spec, seed 0."""
    spec = neural.TrainSpec(task="move_to", seed=0)
    t0 = time.perf_counter()
    result = neural.train_task_node(spec)
    return result.params, time.perf_counter() - t0


@pytest.fixture(scope="session")
def trained_shoot():
    spec = neural.TrainSpec(task="shoot", iterations=400, max_steps=12, seed=0)
    result = neural.train_task_node(spec)
    return result.params
