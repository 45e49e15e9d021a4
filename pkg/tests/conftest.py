"""Per-criterion PASS/FAIL report for the acceptance suite."""

import pytest

_results: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when == "teardown" and report.passed:
        return
    n, title = mark.args
    entry = _results.setdefault(n, {"title": title, "ok": True, "failed": []})
    if report.failed or report.skipped:
        entry["ok"] = False
        entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_results):
        r = _results[n]
        verdict = "PASS" if r["ok"] else "FAIL"
        line = f"criterion {n:2d} {verdict}: {r['title']}"
        if r["failed"]:
            line += f" (failed: {', '.join(r['failed'])})"
        terminalreporter.write_line(line)
