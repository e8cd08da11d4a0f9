"""Nearest-neighbor index tests: exact-mode oracle, recall, pooling rules."""

import numpy as np
import pytest

from cnre import retrieval


def _linear_scan(space, q, n_c, exclude_id=None):
    dist = np.sum((space - q) ** 2, axis=1)
    order = np.lexsort((np.arange(space.shape[0]), dist))
    return [int(i) for i in order if exclude_id is None or int(i) != exclude_id][:n_c]


def test_three_point_example():
    space = np.array([[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]])
    index = retrieval.build_index(space)
    hood = retrieval.query(index, np.array([0.9, 0.0]), 1)
    assert hood.ids == [1]


def test_exact_matches_linear_scan():
    rng = np.random.default_rng(0)
    space = rng.normal(size=(300, 8))
    index = retrieval.build_index(space, mode="exact")
    for _ in range(1000):
        q = rng.normal(size=8)
        excl = int(rng.integers(300)) if rng.random() < 0.5 else None
        hood = retrieval.query(index, q, 10, exclude_id=excl)
        assert hood.ids == _linear_scan(space, q, 10, exclude_id=excl)


def test_exact_ties_break_by_index():
    space = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
    index = retrieval.build_index(space)
    hood = retrieval.query(index, np.zeros(2), 3)
    assert hood.ids == [0, 1, 2]


def test_approximate_recall_small():
    rng = np.random.default_rng(1)
    space = rng.normal(size=(600, 12))
    exact = retrieval.build_index(space, mode="exact")
    approx = retrieval.build_index(space, mode="approximate", seed=0)
    hits = total = 0
    for _ in range(200):
        q = rng.normal(size=12)
        want = set(retrieval.query(exact, q, 10).ids)
        got = set(retrieval.query(approx, q, 10).ids)
        hits += len(want & got)
        total += len(want)
    assert hits / total >= 0.95


def test_self_exclusion():
    rng = np.random.default_rng(2)
    space = rng.normal(size=(50, 4))
    for mode in ("exact", "approximate"):
        index = retrieval.build_index(space, mode=mode, seed=3)
        for i in (0, 17, 49):
            hood = retrieval.query(index, space[i], 5, exclude_id=i)
            assert i not in hood.ids
            assert len(hood.ids) == 5


def test_neighbor_count_monotone_in_n_c():
    rng = np.random.default_rng(3)
    space = rng.normal(size=(40, 3))
    index = retrieval.build_index(space)
    q = rng.normal(size=3)
    prev = []
    for n_c in (1, 3, 7, 15):
        ids = retrieval.query(index, q, n_c).ids
        assert len(ids) == n_c
        assert ids[:len(prev)] == prev  # extending n_c only appends
        prev = ids


def test_pooled_is_neighbor_mean():
    rng = np.random.default_rng(4)
    space = rng.normal(size=(30, 5))
    index = retrieval.build_index(space)
    hood = retrieval.query(index, rng.normal(size=5), 6)
    np.testing.assert_allclose(hood.pooled,
                               space[hood.ids].mean(axis=0, keepdims=True),
                               atol=1e-12)
    assert hood.pooled.shape == (1, 5)


def test_pooled_zero_when_no_neighbors():
    space = np.array([[1.0, 2.0]])
    index = retrieval.build_index(space)
    hood = retrieval.query(index, np.zeros(2), 3, exclude_id=0)
    assert hood.ids == []
    np.testing.assert_array_equal(hood.pooled, np.zeros((1, 2)))


def test_fewer_rows_than_n_c():
    space = np.eye(3)
    index = retrieval.build_index(space)
    hood = retrieval.query(index, np.zeros(3), 10)
    assert sorted(hood.ids) == [0, 1, 2]


def test_index_snapshot_is_frozen():
    space = np.eye(2)
    index = retrieval.build_index(space)
    space[0, 0] = 99.0  # mutating the source must not affect the index
    hood = retrieval.query(index, np.array([1.0, 0.0]), 1)
    assert hood.ids == [0]


def test_validation_errors():
    with pytest.raises(ValueError):
        retrieval.build_index(np.ones((2, 2)), mode="fuzzy")
    with pytest.raises(ValueError):
        retrieval.build_index(np.ones(3))
    index = retrieval.build_index(np.ones((2, 2)))
    with pytest.raises(ValueError):
        retrieval.query(index, np.ones(2), 0)
    with pytest.raises(ValueError):
        retrieval.query(index, np.ones(3), 1)


def test_approximate_deterministic_given_seed():
    rng = np.random.default_rng(5)
    space = rng.normal(size=(200, 6))
    a = retrieval.build_index(space, mode="approximate", seed=11)
    b = retrieval.build_index(space, mode="approximate", seed=11)
    for _ in range(20):
        q = rng.normal(size=6)
        assert retrieval.query(a, q, 8).ids == retrieval.query(b, q, 8).ids
