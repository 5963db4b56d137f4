"""Collect acceptance results and print one PASS/FAIL line per criterion."""
import re

import pytest

_RESULTS: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record an outcome, then assert it so the test itself passes or fails."""

    def record(name: str, ok: bool, detail: str) -> None:
        _RESULTS.append((name, bool(ok), detail))
        assert ok, f"{name}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")

    def order(row):
        num, rest = re.match(r"(\d+)(.*)", row[0]).groups()
        return int(num), rest

    for name, ok, detail in sorted(_RESULTS, key=order):
        tr.write_line(f"{'PASS' if ok else 'FAIL'}  {name:<6} {detail}")
