"""Shared test plumbing: the acceptance-gate reporter.

Tests marked ``criterion(num, title)`` feed a summary table printed at the
end of the session, one pass/fail line per gate check. Several tests may
share a criterion number; the line fails if any of them failed.
"""
from __future__ import annotations

import pytest

_CRITERIA: dict[int, dict] = {}


def _entry(num: int, title: str = "") -> dict:
    e = _CRITERIA.setdefault(num, {"title": title, "failed": False,
                                   "ran": False, "notes": []})
    if title and not e["title"]:
        e["title"] = title
    return e


def pytest_configure(config):
    config.addinivalue_line(
        "markers",
        "criterion(num, title): ties a test to one acceptance-gate check")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    e = _entry(*mark.args)
    if report.when == "call":
        e["ran"] = True
        if report.failed:
            e["failed"] = True
    elif report.failed:
        # setup/teardown errors sink the criterion too
        e["failed"] = True


@pytest.fixture
def criterion_note():
    """Attach a measured value to the criterion's summary line."""
    def _note(num: int, text: str) -> None:
        _entry(num)["notes"].append(text)
    return _note


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for num in sorted(_CRITERIA):
        e = _CRITERIA[num]
        if e["failed"]:
            state = "FAIL"
        elif not e["ran"]:
            state = "SKIP"
        else:
            state = "PASS"
        note = ("  (" + "; ".join(e["notes"]) + ")") if e["notes"] else ""
        terminalreporter.write_line(
            f"criterion {num:2d} [{state}] {e['title']}{note}")
