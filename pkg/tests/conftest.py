import numpy as np
import pytest

from cltprobe.fixtures import (FactFixtureSpec, PlantedCircuitSpec, build_discovery_fixture,
                               build_fact_fixture, build_planted_model)

# lines reported by tests/test_acceptance.py, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("Tier-1 acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def planted():
    return build_planted_model()


@pytest.fixture(scope="session")
def overridable():
    return build_planted_model(PlantedCircuitSpec(overridable=True))


@pytest.fixture(scope="session")
def fact():
    return build_fact_fixture(FactFixtureSpec())


@pytest.fixture(scope="session")
def discovery():
    return build_discovery_fixture()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
