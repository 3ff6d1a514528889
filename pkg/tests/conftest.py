import pytest

_LINES = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request, capsys):
    """Record and print one pass/fail line for a numbered acceptance criterion."""
    lines = request.config.stash.setdefault(_LINES, {})

    def record(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines[n] = line
        with capsys.disabled():
            print("\n" + line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
