import os
import tempfile

# keep test runs from writing into the checkout's logs/
os.environ.setdefault("SRCID_LOG_DIR", os.path.join(tempfile.gettempdir(), "srcid-test-logs"))

import numpy as np
import pytest

from srcid.services.assembly import CoefficientSet, TimeGrid
from srcid.services.mesh import Mesh, build_rect_mesh, tag_boundary
from srcid.services.pde import CrankNicolson
from srcid.services.scenarios import SQUARE, standard_coefficients

RUN_SLOW = os.getenv("SRCID_RUN_SLOW") == "1"


def pytest_collection_modifyitems(config, items):
    if RUN_SLOW:
        return
    skip = pytest.mark.skip(reason="table reproduction run; set SRCID_RUN_SLOW=1")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def reference_triangle() -> Mesh:
    return Mesh(nodes=[[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], triangles=[[0, 1, 2]],
                boundary_edges=[[0, 1], [1, 2], [2, 0]], gamma=[True, True, True],
                h=np.sqrt(2.0), bounds=(0.0, 1.0, 0.0, 1.0)).validate()


@pytest.fixture
def unit_square() -> Mesh:
    """Two triangles, Gamma = whole boundary."""
    return tag_boundary(build_rect_mesh((0.0, 1.0, 0.0, 1.0), 1), "all")


@pytest.fixture
def square9() -> Mesh:
    """[-1, 1]^2 with 9 nodes, Gamma = whole boundary."""
    return tag_boundary(build_rect_mesh(SQUARE, 2), "all")


@pytest.fixture
def standard() -> CoefficientSet:
    return standard_coefficients()


@pytest.fixture
def disc9(square9, standard) -> CrankNicolson:
    return CrankNicolson(square9, TimeGrid(1.0, 4), standard)


@pytest.fixture
def rng():
    return np.random.default_rng(20240617)
