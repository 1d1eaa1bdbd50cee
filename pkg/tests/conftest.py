import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pmelab.grid import Field, Grid

settings.register_profile("pde", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pde")


def space_time_bump(g: Grid, x0=0.5, t0=None, r=0.2, s=None, H=1.0) -> Field:
    """Obstacle ``H·(1 - ((x-x0)/r)² - ((t-t0)/s)²)_+²`` on a 1-D grid."""
    t0 = g.T / 2 if t0 is None else t0
    s = g.T / 3 if s is None else s
    X, T = np.meshgrid(g.axes()[0], g.times)
    q = 1 - ((X - x0) / r) ** 2 - ((T - t0) / s) ** 2
    return Field(g, H * np.maximum(q, 0) ** 2, "psi")


@pytest.fixture
def bump():
    return space_time_bump


ACCEPTANCE = {}


def record(number: int, detail: str):
    ACCEPTANCE[number] = detail


def pytest_terminal_summary(terminalreporter):
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or rep.when != "call" \
                    and outcome == "passed":
                continue
            num = int(nodeid.split("test_criterion_")[1][:2])
            rows[num] = "PASS" if outcome == "passed" and rows.get(num) != "FAIL" else "FAIL"
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(rows):
        terminalreporter.write_line(f"criterion {num:2d}: {rows[num]}  {ACCEPTANCE.get(num, '')}")
