import numpy as np
import pytest

from covsteer.model import benchmark_instance
from covsteer.steering import run_algorithm1, solve_two_step

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_LINES: dict = {}


@pytest.fixture(scope="session")
def benchmark():
    return benchmark_instance()


@pytest.fixture(scope="session")
def solved(benchmark):
    model, cc = benchmark
    return run_algorithm1(model, cc)


@pytest.fixture(scope="session")
def unconstrained_solution():
    model, _ = benchmark_instance(constrained=False)
    return model, solve_two_step(model)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        ok, detail = ACCEPTANCE_LINES[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
