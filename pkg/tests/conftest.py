import pytest

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion; returns the verdict."""
    lines = request.config.stash[_LINES]

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        lines.append((number, f"{'PASS' if passed else 'FAIL'} [{number}] {title}: {detail}"))
        print(lines[-1][1])
        return passed

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
