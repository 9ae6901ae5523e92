import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """``criterion(n, name, ok, detail)`` records one PASS/FAIL line and returns ``ok``."""

    def record(n: int, name: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {n} [{name}]: {'PASS' if ok else 'FAIL'}" + (f" ({detail})" if detail else "")
        request.config.stash[_LINES].append((n, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
