import numpy as np
import pytest

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[rep.outcome]
        key = (number, item.name)
        # a sub-test failing marks the whole criterion
        _CRITERIA[key] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    by_number = {}
    for (number, name), (title, status) in sorted(_CRITERIA.items()):
        by_number.setdefault(number, (title, []))[1].append((name, status))
    for number, (title, parts) in sorted(by_number.items()):
        overall = "PASS" if all(s == "PASS" for _, s in parts) else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {overall}  {title}")
        for name, status in parts:
            terminalreporter.write_line(f"    {status}  {name}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
