import os

import pytest

TOKEN = "c" * 64

SCENARIO_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "scenarios")

# Populated by the acceptance tests; echoed at the end of the run so the
# one-line-per-criterion verdicts survive pytest's output capture.
ACCEPTANCE_RESULTS: list[tuple[str, str]] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for name, status in ACCEPTANCE_RESULTS:
            terminalreporter.write_line(f"{name}: {status}")


@pytest.fixture
def token():
    return TOKEN


@pytest.fixture
def scenario_dir():
    return os.path.abspath(SCENARIO_DIR)
