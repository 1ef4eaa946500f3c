import numpy as np
import pytest

from arealbayes import ArealGraph, grid_graph


@pytest.fixture
def path2():
    return ArealGraph([0, 1], [(0, 1)])


@pytest.fixture
def cycle4():
    return ArealGraph([0, 1, 2, 3], [(0, 1), (1, 2), (2, 3), (0, 3)])


@pytest.fixture
def grid33():
    return grid_graph(3, 3, rule="rook")


@pytest.fixture
def grid45():
    return grid_graph(4, 5, rule="rook")


@pytest.fixture
def rng():
    return np.random.default_rng(20220101)
