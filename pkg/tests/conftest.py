import numpy as np
import pytest

from netpp.synthetic import grid_network, random_network, random_zones
from netpp.zoning import EventSet


def random_events(net, n, T, rng, t_low=0.0, marks=None):
    rng = np.random.default_rng(rng)
    e = rng.integers(net.n_edges, size=n)
    o = rng.uniform(size=n) * net.lengths[e]
    c = rng.integers(1, 4, size=n)
    l = rng.integers(1, 8, size=n)
    t = np.sort(rng.uniform(t_low, T, size=n))
    return EventSet(t, e, o, c, l).with_locations(net)


@pytest.fixture
def small_net():
    return random_network(8, 14, 0, connected=True)


@pytest.fixture
def grid():
    return grid_network(6, 0.5)


@pytest.fixture
def grid_zones(grid):
    return random_zones(grid.n_edges, 7, 0)
