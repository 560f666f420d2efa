import sys

import numpy as np
import pytest

from hdmnet.config import StageConfig
from hdmnet.episodes import generate_class_bank, sample_episode


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_stage():
    """Two stages, narrow channels; 16x16 images give 2x2 and 1x1 grids."""
    return StageConfig(stages=2, channels=(4, 6))


@pytest.fixture
def bank():
    return generate_class_bank(8, seed=0)


@pytest.fixture
def episode16(bank):
    return sample_episode(bank[0], 1, 16, 16, np.random.default_rng(3))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(verdicts):
        terminalreporter.write_line(verdicts[n])
