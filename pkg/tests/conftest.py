import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_RESULTS_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS_KEY] = {}


@pytest.fixture
def criterion(request):
    """Record a numbered acceptance result; the summary prints one line per criterion."""
    results = request.config.stash[_RESULTS_KEY]

    def record(number: int, title: str, passed: bool, detail: str = ""):
        results[number] = (title, passed, detail)
        print(f"criterion {number} {'PASS' if passed else 'FAIL'}: {title} {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, passed, detail = results[number]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {number:2d}. {title}  {detail}".rstrip())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
