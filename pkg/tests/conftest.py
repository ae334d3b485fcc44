import pytest

_VERDICTS = []


@pytest.fixture
def verdict():
    """Print and record one PASS/FAIL line, then assert on it."""

    def report(number, title, ok, detail):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {title} [{detail}]"
        print(line)
        _VERDICTS.append(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
