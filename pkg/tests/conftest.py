import numpy as np
import pytest

from fpflow.geometry import fibonacci_sphere


def triangular_lattice(n, h=1.0, z=0.0, origin=(0.0, 0.0)):
    """``n x n`` equilateral lattice in the plane ``z``; returns (points, row, col)."""
    j, i = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    x = origin[0] + h * (i + 0.5 * (j % 2))
    y = origin[1] + h * np.sqrt(3) / 2 * j
    P = np.column_stack([x.ravel(), y.ravel(), np.full(x.size, z)])
    return P, j.ravel(), i.ravel()


def interior(row, col, n, margin=3):
    return (row >= margin) & (row < n - margin) & (col >= margin) & (col < n - margin)


def random_rotation(rng):
    Q, R = np.linalg.qr(rng.normal(size=(3, 3)))
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


@pytest.fixture
def lattice():
    return triangular_lattice


@pytest.fixture(scope="session")
def sphere_2000():
    return fibonacci_sphere(2000)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    def record(criterion, ok, detail):
        line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
