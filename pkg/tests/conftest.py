import math

import numpy as np
import pytest

from sosik.chain import ChainSpec, Goal

TABLE1_LIMITS = (math.pi / 4, math.pi / 4, math.pi / 8, math.pi / 4, math.pi / 4,
                 math.pi / 2, math.pi / 4, math.pi / 4, math.pi / 2, math.pi / 8)
TABLE1_LENGTHS = (2.0, 2.0, 1.0, 2.0, 3.0, 2.0, 4.0, 4.0, 1.0, 2.0)


def planar_chain(n_links, limits=None, goal=None, lengths=None):
    lengths = lengths or (1.0,) * n_links
    limits = limits if limits is not None else (math.pi / 3,) * (n_links - 1)
    goal = goal or Goal(kind="position", x_n=(float(n_links), 0.0))
    return ChainSpec(dimension=2, link_lengths=tuple(lengths),
                     angle_limits=tuple(limits), base=(0.0, 0.0), goal=goal)


def spatial_chain(n_links, limits=None, goal=None, lengths=None):
    lengths = lengths or (1.0,) * n_links
    limits = limits if limits is not None else (math.pi / 3,) * (n_links - 1)
    goal = goal or Goal(kind="position", x_n=(float(n_links), 0.0, 0.0))
    return ChainSpec(dimension=3, link_lengths=tuple(lengths),
                     angle_limits=tuple(limits), base=(0.0, 0.0, 0.0), goal=goal)


def table1_chain(n_links=10, goal=None):
    """Truncation of the bundled 10-link planar chain (first n entries)."""
    lim = TABLE1_LIMITS[:n_links]
    return planar_chain(
        n_links,
        limits=lim[: n_links - 1],
        lengths=TABLE1_LENGTHS[:n_links],
        goal=goal or Goal(kind="position", x_n=(sum(TABLE1_LENGTHS[:n_links]), 0.0)),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
