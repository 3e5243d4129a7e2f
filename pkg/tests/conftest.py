"""Collects acceptance-criterion outcomes and prints one line per criterion."""
import pytest

_results = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n = marker.args[0]
    if report.when == "setup" and report.outcome != "passed":
        _results[n] = ("FAIL" if report.failed else "SKIP", "setup " + report.outcome)
    elif report.when == "call":
        detail = dict(item.user_properties).get("detail", "")
        _results[n] = ("PASS" if report.passed else "FAIL", detail)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        status, detail = _results[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}".rstrip())
