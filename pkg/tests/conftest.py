import numpy as np
import pytest

from occrender import _backend
from occrender.grid import GridGeometry, SemanticSchema, VoxelGrid


ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_lines(request):
    """Verdict lines of the acceptance suite, echoed again in the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_LINES, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(params=_backend.available())
def backend(request):
    """Every kernel backend importable in this environment."""
    return request.param


def random_grid(rng, dims=(8, 8, 8), k=3, voxel_size=0.5, origin=(0.0, 0.0, 0.0), density_mu=-1.0):
    geo = GridGeometry(dims, origin, voxel_size)
    schema = SemanticSchema(tuple(f"c{i}" for i in range(k)))
    return VoxelGrid(geo, schema, rng.normal(density_mu, 1.5, dims), rng.normal(0.0, 1.0, dims + (k,)))


def random_ray_into(rng, geo):
    """Origin near the grid, direction aimed at a random interior point."""
    lo, hi = geo.lo, geo.hi
    span = hi - lo
    origin = lo + span * rng.uniform(-0.3, 1.3, 3)
    target = lo + span * rng.uniform(0.1, 0.9, 3)
    d = target - origin
    return origin, d / np.linalg.norm(d)
