import pytest

from ebp import harness

_acceptance_lines = []


@pytest.fixture
def cluster():
    """Default 4-depot chain with a seeded RNG; torn down after the test."""
    with harness.spawn_cluster(4, seed=1234) as c:
        yield c


@pytest.fixture
def single_depot():
    with harness.spawn_cluster(1, seed=99) as c:
        yield c


@pytest.fixture
def acceptance_report():
    """Record one PASS line per criterion; echoed in the terminal summary."""
    def ok(criterion, detail):
        line = f"ACCEPTANCE {criterion}: PASS - {detail}"
        _acceptance_lines.append(line)
        print(line)
    return ok


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in _acceptance_lines:
            terminalreporter.write_line(line)
