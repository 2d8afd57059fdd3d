import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # makes ``import oracles`` work from any rootdir

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): one numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    n, title = mark.args
    measured = "; ".join(str(v) for k, v in item.user_properties if k == "measured")
    _RESULTS[n] = (title, "PASS" if report.passed else "FAIL", measured)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        title, status, measured = _RESULTS[n]
        line = f"criterion {n} {status}: {title}"
        if measured:
            line += f" [{measured}]"
        terminalreporter.write_line(line)
