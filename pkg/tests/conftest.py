"""Collects one pass/fail line per acceptance criterion and prints them at the end of the run."""

import pytest

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def record():
    """record(number, passed, detail) stores and prints one line for a criterion."""

    def _record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[number])
