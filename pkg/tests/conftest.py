"""Collects acceptance verdicts and prints them as a block at the end of the run."""

import pytest

VERDICTS: dict = {}


@pytest.fixture
def verdict():
    """``verdict(n, ok, detail)`` records one PASS/FAIL line for criterion ``n``."""
    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        VERDICTS[n] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
