"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

import pytest

_results = {}


def pytest_runtest_logreport(report):
    acc = getattr(report, "acceptance", None)
    if acc is None:
        return
    number, title = acc
    ok, _ = _results.get(number, (True, title))
    bad = report.failed or (report.when == "call" and report.skipped)
    _results[number] = (ok and not bad, title)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        outcome.get_result().acceptance = tuple(marker.args)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        ok, title = _results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}")
