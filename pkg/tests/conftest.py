import numpy as np
import pytest

from rodservo.rodsim import GraspPose, RodParams, WorkspaceBox, generate_dataset

BOX = WorkspaceBox((0.2, 0.2), (0.6, 0.6))


def quarter_arc(L, n):
    """Analytic quarter circle of length L from the origin, tangent 0 at the base."""
    R = 2 * L / np.pi
    phi = np.linspace(0.0, np.pi / 2, n)
    return np.column_stack([R * np.sin(phi), R * (1 - np.cos(phi))])


def arc_distance(points, L):
    """Distance of points to the analytic quarter-arc circle (centre (0, R))."""
    R = 2 * L / np.pi
    return np.abs(np.linalg.norm(points - np.array([0.0, R]), axis=1) - R)


@pytest.fixture(scope="session")
def params():
    return RodParams()


@pytest.fixture(scope="session")
def quarter_grasp():
    L = 1.0
    return GraspPose((2 * L / np.pi, 2 * L / np.pi), np.pi / 2)


@pytest.fixture(scope="session")
def small_dataset(params):
    """300 warm-started samples; flat centerlines, N = 20."""
    pairs = generate_dataset(params, BOX, 300, seed=3, N=20)
    return np.array([c.flat for _, c in pairs])


# --- acceptance summary ------------------------------------------------------

_ACCEPTANCE = {}


@pytest.fixture
def verdict():
    """Record and print one pass/fail line for an acceptance criterion."""
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        _ACCEPTANCE[number] = line
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
