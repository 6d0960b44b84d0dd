"""Shared fixtures and the acceptance summary printed at the end of a run."""

import pytest

# criterion -> list of (part, passed, detail), in recording order
_ACCEPTANCE: dict = {}


@pytest.fixture
def acceptance():
    """Record the outcome of one acceptance criterion (or one part of it)."""

    def record(criterion: str, passed: bool, detail: str, part: str = "") -> bool:
        _ACCEPTANCE.setdefault(criterion, []).append((part, bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, parts in _ACCEPTANCE.items():
        ok = all(p[1] for p in parts)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {criterion}")
        for part, passed, detail in parts:
            label = f"[{part}] " if part else ""
            terminalreporter.write_line(f"        {'ok  ' if passed else 'fail'} {label}{detail}")
