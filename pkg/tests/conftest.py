import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

import models


@pytest.fixture(scope="session")
def stage_net():
    return models.trained_stage()[0]


@pytest.fixture(scope="session")
def experience_net():
    return models.trained_experience()


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    verdicts = getattr(module, "VERDICTS", None)
    if verdicts:
        terminalreporter.section("acceptance criteria")
        for number in sorted(verdicts):
            terminalreporter.write_line(verdicts[number])
