"""Small point-cloud primitives shared by the network, data, and metrics code."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


def farthest_point_sampling(cloud, m: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subset of ``m`` indices beginning at ``start``.

    Ties are resolved toward the lowest index.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    if not 0 <= start < max(len(cloud), 1) and m > 0:
        raise ValueError(f"start index {start} out of range for {len(cloud)} points")
    return batched_fps(cloud[None], m, np.array([start]))[0]


def batched_fps(clouds, m: int, starts) -> np.ndarray:
    """:func:`farthest_point_sampling` on a (B, K, 3) stack with per-cloud starts."""
    clouds = np.asarray(clouds, dtype=np.float64)
    b, k, _ = clouds.shape
    if m > k:
        raise ValueError(f"cannot pick {m} points from a cloud of {k}")
    chosen = np.empty((b, max(m, 0)), dtype=np.int64)
    if m <= 0:
        return chosen
    rows = np.arange(b)
    cur = np.asarray(starts, dtype=np.int64)
    chosen[:, 0] = cur
    d = ((clouds - clouds[rows, cur][:, None]) ** 2).sum(-1)
    for i in range(1, m):
        cur = np.argmax(d, axis=1)
        chosen[:, i] = cur
        np.minimum(d, ((clouds - clouds[rows, cur][:, None]) ** 2).sum(-1), out=d)
    return chosen


def farthest_from_centroid(cloud) -> int | np.ndarray:
    """Rotation- and permutation-stable FPS seed: the point farthest from the mean.

    Accepts one (K, 3) cloud or a (B, K, 3) stack.
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    far = np.argmax(((cloud - cloud.mean(axis=-2, keepdims=True)) ** 2).sum(-1), axis=-1)
    return int(far) if cloud.ndim == 2 else far


def knn(queries, points, k: int) -> np.ndarray:
    """Indices ``(Q, k)`` of the ``k`` nearest ``points`` for each query, nearest first.

    Equal distances are ordered by index.  Leading batch axes are supported.
    """
    queries = np.asarray(queries, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[-2]
    if k > n:
        raise ValueError(f"k={k} exceeds point count {n}")
    d = np.zeros(queries.shape[:-1] + (n,))
    for c in range(3):
        d += (queries[..., :, None, c] - points[..., None, :, c]) ** 2
    if k < n:
        part = np.argpartition(d, k - 1, axis=-1)[..., :k]
    else:
        part = np.broadcast_to(np.arange(n), d.shape).copy()
    dp = np.take_along_axis(d, part, axis=-1)
    order = np.lexsort((part, dp), axis=-1)
    return np.take_along_axis(part, order, axis=-1)


def nearest_sqdist(a, b) -> np.ndarray:
    """For each point of ``a``, the squared distance to its nearest point of ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) * len(b) <= 262_144:
        return ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1).min(axis=1)
    _, idx = cKDTree(b).query(a)
    return ((a - b[idx]) ** 2).sum(-1)


def recenter(cloud):
    """Return ``(cloud - mean, mean)``."""
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or len(cloud) == 0:
        raise ValueError("recenter needs a non-empty (K, 3) cloud")
    mu = cloud.mean(axis=0)
    return cloud - mu, mu
