import numpy as np
import pytest

_CRITERIA: dict[int, tuple[str, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.failed or (call.when == "call" and number not in _CRITERIA):
        status = "FAIL" if report.failed else "PASS"
        if _CRITERIA.get(number, ("PASS",))[0] != "FAIL":
            _CRITERIA[number] = (status, title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}: {title}")
