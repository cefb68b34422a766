import numpy as np
import pytest

from relay_steer import DiffusionSpec, Scenario, SolverOptions, scenario_from_dict

REFERENCE = {
    "A": [[1.0, 0.0], [0.0, 1.0]],
    "B": [[1.0, 0.0], [0.0, 1.0]],
    "x": [1.0, 1.0],
    "y": [0.5, 0.0],
    "T": 1.0,
    "rho": {"confidence": 0.9},
    "sigma": {
        "kind": "affine_zero",
        "y_zero": [0.5, 0.0],
        "matrices": [[[0.5, 0.0], [0.0, 0.5]], [[0.5, 0.0], [0.0, 0.5]]],
    },
}


@pytest.fixture
def reference_scenario():
    """2-D reference: A = B = I, sigma_j = 0.5 (X - y), rho for 90% confidence."""
    return scenario_from_dict(REFERENCE)


@pytest.fixture
def scalar_sliding():
    """dX = -2 sign(X) dt from x = 1: analytic hitting time 0.5."""
    return Scenario(
        A=[[0.0]],
        B=[[1.0]],
        sigma=DiffusionSpec.linear([np.zeros((1, 1))]),
        x=[1.0],
        y=[0.0],
        T=1.0,
        rho=2.0,
        solver=SolverOptions(dt=1e-4, epsilon=1e-6),
    )


ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    """Store one PASS/FAIL line for the acceptance summary."""
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
