import os

import hypothesis
import numpy as np
import pytest

from rmfg.game_model import catalog_spec

hypothesis.settings.register_profile("default", deadline=None, max_examples=60)
hypothesis.settings.register_profile("fast", deadline=None, max_examples=10)
hypothesis.settings.register_profile("thorough", deadline=None, max_examples=500)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def unit_lq():
    return catalog_spec("lq")


@pytest.fixture
def mean_drift():
    return catalog_spec("lq-mean-drift")


@pytest.fixture
def smooth():
    return catalog_spec("smooth-nonquadratic-test")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CRITERION_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    """Record a criterion's one-line verdict for the end-of-session summary."""
    def record(line: str) -> None:
        print(line)
        CRITERION_LINES.append(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERION_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
