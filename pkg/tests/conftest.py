import pytest

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line: ``criterion(n, ok, detail, seconds, limit)`` returns the overall verdict."""
    lines = request.config.stash[ACCEPTANCE]

    def record(n, ok, detail, seconds, limit):
        verdict = bool(ok) and seconds <= limit
        line = f"criterion {n}: {'PASS' if verdict else 'FAIL'} - {detail}; {seconds:.1f} s (limit {limit:.0f} s)"
        lines.append(line)
        print(line)
        return verdict

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
