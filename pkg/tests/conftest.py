import dataclasses

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from collabfuse.world import ScenarioConfig, generate_frames, stack_frames

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def scenario():
    return ScenarioConfig()


@pytest.fixture(scope="session")
def small_scenario():
    return dataclasses.replace(ScenarioConfig(), frames_per_episode=20)


@pytest.fixture(scope="session")
def small_frames(small_scenario):
    return generate_frames(small_scenario, 64, seed=3)


@pytest.fixture(scope="session")
def small_arrays(small_frames, small_scenario):
    return stack_frames(small_frames, small_scenario)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
