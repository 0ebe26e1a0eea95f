from __future__ import annotations

import pytest

from dialogmem.backends.mock import MockBackend

# criterion number -> (title, outcome); filled in by the acceptance tests' reports.
_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion check")


def pytest_runtest_logreport(report):
    marker = getattr(report, "criterion", None)
    if marker is None:
        return
    number, title = marker
    entry = _CRITERIA.setdefault(number, [title, "pass"])
    if report.skipped:
        if entry[1] == "pass":
            entry[1] = "skip"
    elif report.failed:
        entry[1] = "FAIL"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None:
        rep.criterion = tuple(mark.args)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {status.upper():4} {title}")


@pytest.fixture
def mock() -> MockBackend:
    return MockBackend(dimension=256)


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path, monkeypatch):
    # keeps CLI runs without --cache from writing into the working directory
    monkeypatch.setenv("DIALOGMEM_CACHE", str(tmp_path / "default_cache"))
