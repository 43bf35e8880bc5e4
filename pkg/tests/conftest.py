import numpy as np
import pytest

from bodycorr.mesh_core import TriMesh, grid_mesh


def floyd_warshall(mesh):
    """All-pairs shortest paths by dense Floyd-Warshall; oracle for the Dijkstra path."""
    n = mesh.n_vertices
    d = np.full((n, n), np.inf)
    np.fill_diagonal(d, 0.0)
    for (a, b), w in zip(mesh.edges, mesh.edge_lengths):
        d[a, b] = min(d[a, b], w)
        d[b, a] = min(d[b, a], w)
    for k in range(n):
        d = np.minimum(d, d[:, k:k + 1] + d[k:k + 1, :])
    return d


def random_mesh(n_side, rng_seed=0):
    """Jittered grid with n_side**2 vertices (connected, random edge lengths)."""
    return grid_mesh(n_side, n_side, spacing=0.1, jitter=0.3, rng_seed=rng_seed)


def path_mesh(n):
    """Collinear vertices at x = 0..n-1 strung into a triangle strip."""
    v = np.zeros((n, 3))
    v[:, 0] = np.arange(n)
    faces = [(i, i + 1, i + 2) for i in range(n - 2)]
    return TriMesh(v, np.array(faces))


@pytest.fixture(scope="session")
def mesh150():
    # 15 x 10 grid
    return grid_mesh(15, 10, spacing=0.1, jitter=0.3, rng_seed=7)


@pytest.fixture(scope="session")
def mesh150_apsp(mesh150):
    return floyd_warshall(mesh150)


# acceptance criteria: one pass/fail line each in the terminal summary
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    n, title = mark.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    ok = rep.passed and _CRITERIA.get(n, (True,))[0]
    _CRITERIA[n] = (ok, title, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, title, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else ""))
