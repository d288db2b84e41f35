"""Collects acceptance outcomes and prints one line per criterion."""

from collections import defaultdict

import pytest

_outcomes = defaultdict(list)
_titles = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n = mark.args[0]
    _titles.setdefault(n, mark.args[1] if len(mark.args) > 1 else "")
    # a setup error or a failing call both count against the criterion
    if report.when == "call" or report.outcome == "failed":
        _outcomes[n].append(report.outcome == "passed")


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        status = "PASS" if all(_outcomes[n]) else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status} ({_titles[n]})")
