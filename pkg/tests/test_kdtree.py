import numpy as np
import pytest

from scanloc.kdtree import KDTree
from oracles import brute_force_knn


def test_matches_brute_force_random():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(300, 64))
    ids = rng.permutation(1000)[:300]
    tree = KDTree(data, ids)
    for _ in range(100):
        x = rng.normal(size=64)
        for k in (1, 5, 20):
            d, i = tree.query(x, k)
            rd, ri = brute_force_knn(data, ids, x, k)
            assert i.tolist() == ri
            np.testing.assert_allclose(d, rd, rtol=1e-12)


def test_ties_break_to_lower_id():
    data = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]] * 10)
    ids = np.arange(40)[::-1].copy()
    tree = KDTree(data, ids, leafsize=2)
    _, got = tree.query([0.0, 0.0], 7)
    assert got.tolist() == list(range(7))


def test_duplicate_points_and_full_k():
    data = np.zeros((50, 3))
    tree = KDTree(data)
    d, i = tree.query([0, 0, 0], 50)
    assert i.tolist() == list(range(50))
    assert np.all(d == 0)


def test_query_errors():
    tree = KDTree(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        tree.query([0.0, 0.0], 0)
    with pytest.raises(ValueError):
        tree.query([0.0, 0.0], 4)
    with pytest.raises(ValueError):
        tree.query([0.0], 1)
    with pytest.raises(ValueError):
        KDTree(np.zeros((0, 2)))
