"""Per-criterion PASS/FAIL summary for the acceptance suite."""

import pytest

_RESULTS: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            number, title = mark.args
            _RESULTS.setdefault(number, {"title": title, "outcomes": []})


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if not mark or call.when not in ("setup", "call"):
        return
    if call.when == "setup" and call.excinfo is None:
        return
    number = mark.args[0]
    if call.excinfo is None:
        outcome = "passed"
    elif call.excinfo.errisinstance(pytest.skip.Exception):
        outcome = "skipped"
    else:
        outcome = "failed"
    _RESULTS[number]["outcomes"].append(outcome)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        res = _RESULTS[number]
        outs = res["outcomes"]
        if not outs:
            status = "NOT RUN"
        elif "failed" in outs:
            status = "FAIL"
        elif all(o == "skipped" for o in outs):
            status = "SKIP"
        else:
            status = "PASS"
        skipped = outs.count("skipped")
        note = f" ({skipped} optional checks skipped)" if skipped and status == "PASS" else ""
        terminalreporter.write_line(f"criterion {number}: {status} - {res['title']}{note}")
