import numpy as np
import pytest

from currentglm.geometry import TriMesh
from currentglm.rkhs import KernelSpec, build_grid, project_to_grid, RawCurrent


def random_current(rng, kernel, n_atoms=30, box=(0.0, 4.0), label=""):
    centers = rng.uniform(box[0], box[1], size=(n_atoms, 3))
    vectors = rng.standard_normal((n_atoms, 3))
    return RawCurrent(centers, vectors, kernel, label)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def kernel():
    return KernelSpec(1.5)


@pytest.fixture
def grid64():
    """4 x 4 x 4 cell-center grid over [0, 4]^3."""
    return build_grid([0, 0, 0], [4, 4, 4], 1.0)


@pytest.fixture
def sample40(rng, kernel, grid64):
    """40 projected random currents on ``grid64``."""
    return [project_to_grid(random_current(rng, kernel, label=f"S{k}"), grid64)
            for k in range(40)]


@pytest.fixture
def tetra():
    """Closed, outward-oriented tetrahedron."""
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], float)
    t = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return TriMesh(v, t, "tetra")


# ---------------------------------------------------------------- acceptance summary

_CRITERIA = {}


@pytest.fixture
def record_criterion():
    def record(n, ok, detail):
        _CRITERIA[n] = ("PASS" if ok else "FAIL", detail)
    return record


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if report.when == "call" and name.startswith("test_c") and name[6:8].isdigit():
        n = int(name[6:8])
        if report.failed and _CRITERIA.get(n, ("",))[0] != "FAIL":
            _CRITERIA[n] = ("FAIL", "raised before the check completed")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {detail}")
