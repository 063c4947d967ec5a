import json
from pathlib import Path

import numpy as np
import pytest

import toy_scenarios

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="session")
def toy():
    return toy_scenarios.encoder(0)


@pytest.fixture(scope="session")
def golden():
    return json.loads((FIXTURES / "golden.json").read_text())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    module = sys.modules.get("test_acceptance")
    if module is not None and module.LINES:
        terminalreporter.section("acceptance criteria")
        for line in module.LINES:
            terminalreporter.write_line(line)
