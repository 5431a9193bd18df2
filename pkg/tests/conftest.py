"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""
import re

import pytest

CRITERIA: dict[int, dict] = {}


@pytest.fixture
def record(request):
    """Attach a free-text measurement to the running acceptance criterion."""
    number = int(re.search(r"criterion_(\d+)", request.node.name).group(1))
    entry = CRITERIA.setdefault(number, {"title": "", "detail": "", "outcome": None})

    def _record(title: str, detail: str) -> None:
        entry["title"], entry["detail"] = title, detail

    return _record


def pytest_runtest_logreport(report):
    match = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not match:
        return
    entry = CRITERIA.setdefault(int(match.group(1)), {"title": "", "detail": "", "outcome": None})
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        entry["outcome"] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        e = CRITERIA[number]
        terminalreporter.write_line(
            f"criterion {number:2d} {e['outcome'] or 'NOT RUN':4s} {e['title']}: {e['detail']}")
