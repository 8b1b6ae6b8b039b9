import pytest

from bmo_bsde.timegrid import Constant, TimeGrid, build_martingale, simulate_brownian, stochastic_exponential

SMALL_PATHS = 20_000
SMALL_STEPS = 50


def pytest_configure(config):
    config.addinivalue_line("markers", "desk: full desk-scale run (10^5 paths, 200 steps)")


@pytest.fixture(scope="session")
def small_grid():
    return TimeGrid(1.0, SMALL_STEPS)


@pytest.fixture(scope="session")
def small_bundle(small_grid):
    return simulate_brownian(small_grid, SMALL_PATHS, seed=7)


@pytest.fixture(scope="session")
def half_M(small_bundle):
    """M = 0.5 W with its stochastic exponential."""
    return stochastic_exponential(build_martingale(small_bundle, Constant(0.5)))


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}: {title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def criterion():
    """Records one acceptance line; printed in the terminal summary."""
    return record_criterion
