"""Acceptance reporting: one PASS/FAIL line per ``criterion``-marked test."""

import pytest

_VERDICTS: dict[int, tuple[str, str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion checked by this test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    # the call phase decides the verdict; a failing fixture setup also counts
    if mark is None or not (report.when == "call" or report.failed):
        return
    number, title = mark.args
    detail = dict(item.user_properties).get("detail", "")
    status = "PASS" if report.passed else "FAIL"
    if report.failed:
        crash = getattr(report.longrepr, "reprcrash", None)
        detail = (detail + "; " if detail else "") + (crash.message.splitlines()[0] if crash else "error")
    _VERDICTS[number] = (status, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        status, title, detail = _VERDICTS[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}  {title}: {detail}")
