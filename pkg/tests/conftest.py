import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

FIXTURES = Path(__file__).parent / "fixtures"

_criteria: list[tuple[str, str, float, str]] = []


@pytest.fixture
def fixtures():
    return FIXTURES


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): test checks one acceptance criterion")
    config.addinivalue_line("markers", "slow: long training run (deselect with -m 'not slow')")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        detail = "; ".join(str(v) for k, v in report.user_properties if k == "detail")
        _criteria.append((mark.args[0], report.outcome, report.duration, detail))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, outcome, duration, detail in _criteria:
        status = {"passed": "PASS", "failed": "FAIL"}.get(outcome, outcome.upper())
        line = f"{status}  {name} ({duration:.1f} s)"
        terminalreporter.write_line(f"{line}: {detail}" if detail else line)
