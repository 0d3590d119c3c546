from __future__ import annotations

import numpy as np
import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line for an acceptance criterion; printed again in the summary."""

    def record(number: int, ok: bool, text: str) -> bool:
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {text}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(autouse=True)
def _strict_floats():
    with np.errstate(over="raise", invalid="raise", divide="raise", under="ignore"):
        yield
