import numpy as np
import pytest

from nmpgp.synth import SynthConfig, generate

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def small_market():
    series, truth = generate(SynthConfig(seed=3, days=12))
    return series, truth


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
