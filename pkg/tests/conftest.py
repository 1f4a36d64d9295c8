import numpy as np
import pytest

from cranioshape import synth
from cranioshape.mesh import TriMesh

# lines collected by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def grid_patch(n=5, h=1.0, z=0.0):
    """Flat (n x n)-vertex grid in the plane z = const, CCW faces (normal +z)."""
    xs, ys = np.meshgrid(np.arange(n) * h, np.arange(n) * h, indexing="xy")
    v = np.column_stack([xs.ravel(), ys.ravel(), np.full(n * n, z)])
    f = []
    for j in range(n - 1):
        for i in range(n - 1):
            a = j * n + i
            f.append([a, a + 1, a + n + 1])
            f.append([a, a + n + 1, a + n])
    return TriMesh(v, np.array(f))


def unit_square():
    v = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]], float)
    return TriMesh(v, np.array([[0, 1, 2], [0, 2, 3]]))


def unit_cube():
    v = np.array([[x, y, z] for x in (0, 1) for y in (0, 1) for z in (0, 1)], float)
    f = [[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
         [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]]
    return TriMesh(v, np.array(f))


@pytest.fixture(scope="session")
def small_template():
    return synth.make_template(2.5)


@pytest.fixture(scope="session")
def sphere_mesh():
    dirs, faces = synth.sphere_triangulation(400, seed=3)
    return TriMesh(dirs, faces)


@pytest.fixture(scope="session")
def corresponded_corpus():
    """Phantoms sharing one triangulation, so they are corresponded by construction."""
    scans = synth.generate_corpus({c: 8 for c in range(4)}, seed=3)
    return [synth.resample(s, 2.8, mesh_seed=0, jitter_mm=0.0) for s in scans]
