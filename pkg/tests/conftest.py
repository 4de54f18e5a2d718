import pytest

_LINES = []


@pytest.fixture
def criterion():
    """Record a one-line verdict per acceptance criterion for the summary."""
    return _LINES.append


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
