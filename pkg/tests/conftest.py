import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from confpareto.data import split_random
from confpareto.quantile import QuantileFitConfig, fit_quantile_forest
from confpareto.scenarios import SyntheticConfig, gen_synthetic

settings.register_profile("repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def synthetic_uniform():
    return gen_synthetic(SyntheticConfig(policy="uniform", n=1000, seed=5))


@pytest.fixture(scope="session")
def synthetic_split(synthetic_uniform):
    return split_random(synthetic_uniform, 5)


@pytest.fixture(scope="session")
def small_forest(synthetic_split):
    cfg = QuantileFitConfig(level=0.1, trees=30, seed=3)
    return fit_quantile_forest(synthetic_split.proper_training, 0, cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
