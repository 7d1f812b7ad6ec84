import pytest

ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion; the lines are
    echoed in the terminal summary so they survive output capture."""

    def record(num: int, name: str, ok: bool):
        ACCEPTANCE_LINES.append(f"criterion {num:2d} ({name}): {'PASS' if ok else 'FAIL'}")
        assert ok, f"criterion {num} ({name}) failed"

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
