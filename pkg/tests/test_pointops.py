import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from canonpose.pointops import (batched_fps, farthest_from_centroid, farthest_point_sampling, knn,
                                nearest_sqdist, recenter)


def fps_bruteforce(x, m, start):
    chosen = [start]
    while len(chosen) < m:
        d = np.array([min(((p - x[c]) ** 2).sum() for c in chosen) for p in x])
        chosen.append(int(np.argmax(d)))
    return np.array(chosen)


def test_fps_collinear_example():
    x = np.array([[0.0, 0, 0], [0.1, 0, 0], [1.0, 0, 0]])
    assert list(farthest_point_sampling(x, 2, 0)) == [0, 2]


def test_fps_full_is_permutation(rng):
    x = rng.normal(size=(30, 3))
    idx = farthest_point_sampling(x, 30, 4)
    assert idx[0] == 4
    assert sorted(idx) == list(range(30))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**31), st.data())
def test_fps_matches_bruteforce(n, seed, data):
    x = np.random.default_rng(seed).normal(size=(n, 3))
    m = data.draw(st.integers(1, n))
    start = data.draw(st.integers(0, n - 1))
    assert np.array_equal(farthest_point_sampling(x, m, start), fps_bruteforce(x, m, start))


def test_fps_errors(rng):
    with pytest.raises(ValueError):
        farthest_point_sampling(rng.normal(size=(5, 3)), 6)


def test_batched_fps_matches_single(rng):
    x = rng.normal(size=(3, 20, 3))
    starts = farthest_from_centroid(x)
    got = batched_fps(x, 7, starts)
    for i in range(3):
        assert np.array_equal(got[i], farthest_point_sampling(x[i], 7, int(starts[i])))


def test_farthest_from_centroid_is_rotation_stable(rng):
    x = rng.normal(size=(50, 3))
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    assert farthest_from_centroid(x) == farthest_from_centroid(x @ q.T + 3.0)


def test_knn_matches_sort_with_index_ties(rng):
    pts = np.round(rng.normal(size=(40, 3)), 1)
    pts[5] = pts[9]  # exact duplicate forces a distance tie
    q = rng.normal(size=(6, 3))
    got = knn(q, pts, 8)
    for i in range(6):
        d = ((pts - q[i]) ** 2).sum(-1)
        assert list(got[i]) == list(np.lexsort((np.arange(40), d))[:8])
    with pytest.raises(ValueError):
        knn(q, pts, 41)


def test_knn_batched(rng):
    pts = rng.normal(size=(2, 30, 3))
    q = pts[:, :4]
    got = knn(q, pts, 5)
    for b in range(2):
        assert np.array_equal(got[b], knn(q[b], pts[b], 5))
        assert np.array_equal(got[b][:, 0], np.arange(4))


def test_nearest_sqdist_tree_branch_matches_bruteforce(rng):
    a, b = rng.normal(size=(700, 3)), rng.normal(size=(600, 3))
    assert len(a) * len(b) > 262_144
    brute = ((a[:, None] - b[None]) ** 2).sum(-1).min(axis=1)
    assert np.allclose(nearest_sqdist(a, b), brute, rtol=0, atol=1e-15)


def test_recenter(rng):
    x = rng.normal(size=(10, 3)) + 4
    c, mu = recenter(x)
    assert np.allclose(c + mu, x)
    assert np.abs(c.mean(axis=0)).max() < 1e-14
    with pytest.raises(ValueError):
        recenter(np.zeros((0, 3)))
