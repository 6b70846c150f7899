import sys
from pathlib import Path

import pytest
import torch
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

# property tests share the machine with long training runs; wall-clock
# deadlines would make them flaky, and fixed examples keep reruns identical
settings.register_profile("repo", deadline=None, derandomize=True)
settings.load_profile("repo")

_CRITERIA: dict[int, str] = {}


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def criterion():
    """Record the verdict line for an acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> bool:
        _CRITERIA[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(_CRITERIA[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[number])
