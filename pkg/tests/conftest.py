import pytest

RESULTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[RESULTS] = []


@pytest.fixture
def record(request):
    """Log one acceptance line, then assert it."""
    lines = request.config.stash[RESULTS]

    def _record(number: int, name: str, ok: bool, detail: str = ""):
        lines.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {name}  {detail}".rstrip())
        assert ok, f"criterion {number} ({name}) failed: {detail}"

    return _record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(RESULTS, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
