import numpy as np
import pytest

from ssmtkrd import ModelConfig, init_weights

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(num_layers=4, model_dim=8, inner_dim=16, state_dim=4, seed=7)


@pytest.fixture(scope="session")
def small_weights(small_config):
    return init_weights(small_config)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line per acceptance criterion."""

    def record(criterion, passed, detail=""):
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")
        print(ACCEPTANCE_LINES[-1])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
