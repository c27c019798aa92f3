"""Shared fixtures and the acceptance-criteria summary hook."""

import pytest

_CRITERIA: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion, then assert."""

    def check(number: int, passed: bool, detail: str = ""):
        status = "PASS" if passed else "FAIL"
        _CRITERIA.append(f"criterion {number:2d}: {status}  {detail}".rstrip())
        assert passed, f"criterion {number} failed: {detail}"

    return check
