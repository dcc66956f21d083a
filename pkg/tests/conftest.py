import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ddc_welfare import random_model, reference_model, solve_truth
from ddc_welfare.model import ModelSpec

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def constant_utility_model(c=0.7, n_states=5, n_actions=3, beta=0.9, seed=0):
    rng = np.random.default_rng(seed)
    f = rng.dirichlet(np.ones(n_states), (n_states, n_actions))
    return ModelSpec(np.full((n_states, n_actions), c), f, beta)


@pytest.fixture(scope="session")
def small_model():
    return random_model(11, n_states=6, n_actions=3, beta=0.9)


@pytest.fixture(scope="session")
def small_truth(small_model):
    return solve_truth(small_model)


@pytest.fixture(scope="session")
def ref_model():
    return reference_model()


@pytest.fixture(scope="session")
def ref_truth(ref_model):
    return solve_truth(ref_model)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
