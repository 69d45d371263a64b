import math

import numpy as np
import pytest

from remask.grid import Codebook, Condition
from remask.toyworld import ToyWorld, load_world

LN3 = math.log(3.0)


@pytest.fixture(scope="session")
def uniform_world():
    """2x2, K=2, zero potentials; two conditions sharing one component."""
    return ToyWorld(
        codebook=Codebook(2),
        height=2,
        width=2,
        conditions=(Condition(0, ("plain",)), Condition(1, ("plain",))),
        unary={},
        edges={},
    )


@pytest.fixture(scope="session")
def edge_world():
    """2x2, K=2, one attractive edge (0,1) with exp-weight 3; plus a uniform condition."""
    table = np.array([[LN3, 0.0], [0.0, LN3]])
    return ToyWorld(
        codebook=Codebook(2),
        height=2,
        width=2,
        conditions=(Condition(0, ("coupled",)), Condition(1, ("free",))),
        unary={},
        edges={"coupled": ((0, 1, table),)},
    )


@pytest.fixture(scope="session")
def k4_world():
    """2x3, K=4, strong attractive edges plus condition-specific tilt."""
    beta, tilt = 2.0, 1.0
    attract = np.where(np.eye(4, dtype=bool), beta, 0.0)
    pairs = [(0, 1), (1, 2), (3, 4), (4, 5), (0, 3), (1, 4), (2, 5)]
    return ToyWorld(
        codebook=Codebook(4),
        height=2,
        width=3,
        conditions=(
            Condition(0, ("blob", "zeroish")),
            Condition(1, ("blob", "threeish")),
        ),
        unary={
            "zeroish": tuple((i, np.array([tilt, 0, 0, 0.0])) for i in range(6)),
            "threeish": tuple((i, np.array([0, 0, 0, tilt])) for i in range(6)),
        },
        edges={"blob": tuple((i, j, attract) for i, j in pairs)},
    )


@pytest.fixture(scope="session")
def disjoint_world():
    return load_world("builtin:disjoint")


@pytest.fixture(scope="session")
def overlap_world():
    return load_world("builtin:overlap")


@pytest.fixture(scope="session")
def bgfg_world():
    return load_world("builtin:bgfg")


@pytest.fixture(scope="session")
def texture_world():
    return load_world("builtin:texture")


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
