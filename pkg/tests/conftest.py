"""Per-criterion pass/fail summary for the acceptance suite."""

import pytest

_results: dict[str, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion exercised by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if report.when == "call" or (report.when == "setup" and not report.passed):
        status = "PASS" if report.passed else "SKIP" if report.skipped else "FAIL"
        details = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        _results.setdefault(marker.args[0], []).append((item.name, status, details))


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for name, rows in _results.items():
        statuses = {status for _, status, _ in rows}
        overall = "FAIL" if "FAIL" in statuses else "SKIP" if statuses == {"SKIP"} else "PASS"
        skipped = sum(status == "SKIP" for _, status, _ in rows)
        if overall == "PASS" and skipped:
            overall = f"PASS ({skipped} of {len(rows)} checks skipped)"
        details = " | ".join(d for _, _, d in rows if d)
        terminalreporter.write_line(f"{overall}  {name}" + (f"  ({details})" if details else ""))
