import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

GOLDEN = Path(__file__).parent / "golden"

# criterion number -> [title, outcome, detail]; filled in by the acceptance module
ACCEPTANCE: dict[int, list] = {}
DETAILS: dict[int, str] = {}


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def note(request):
    """``note("text")`` attaches measured values to the test's criterion line."""
    marker = request.node.get_closest_marker("criterion")

    def add(text: str) -> None:
        number = marker.args[0]
        DETAILS[number] = (DETAILS.get(number, "") + "; " + text).lstrip("; ")
        print(f"criterion {number}: {text}")

    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.failed):
        # a criterion split over several tests passes only if all of them do
        prev = ACCEPTANCE.get(number, [title, "PASS"])[1]
        ACCEPTANCE[number] = [title, "PASS" if report.passed and prev == "PASS" else "FAIL"]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, outcome = ACCEPTANCE[number]
        detail = DETAILS.get(number)
        terminalreporter.write_line(f"{outcome} criterion {number:>2}: {title}" + (f" [{detail}]" if detail else ""))
