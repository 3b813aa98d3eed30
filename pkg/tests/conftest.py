import os
import sys

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def grid_best():
    from spsaoi.optimize import SearchSpace, grid_search

    return grid_search(SearchSpace())


@pytest.fixture(autouse=True)
def _no_real_key(monkeypatch):
    # Tests must never pick up a real credential from the developer's shell.
    monkeypatch.delenv("LLM_API_KEY", raising=False)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance.LINES:
        terminalreporter.write_line(line)
