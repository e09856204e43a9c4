import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from canonpose.data import PointCloud
from canonpose.occlusion import camera_basis, depth_camera_crop, recenter, slice_crop
from canonpose.so3 import quat_to_matrix


def test_slice_keeps_lower_half(rng):
    x = rng.normal(size=(11, 3))
    v = np.array([0.0, 0.0, 1.0])
    res = slice_crop(PointCloud(x), direction=v)
    assert len(res.kept_indices) == 6
    assert np.array_equal(res.kept_indices, np.sort(np.argsort(x[:, 2], kind="stable")[:6]))
    assert np.array_equal(res.partial.points, x[res.kept_indices])
    assert np.array_equal(res.partial.indices, res.kept_indices)


def test_slice_offset_is_barycenter_shift(rng):
    x = rng.normal(size=(40, 3))
    res = slice_crop(PointCloud(x), rng)
    assert np.allclose(res.barycenter_offset, x[res.kept_indices].mean(0) - x.mean(0), atol=1e-15)


def test_slice_stable_on_ties():
    x = np.zeros((4, 3))
    res = slice_crop(PointCloud(x), direction=[1.0, 0, 0])
    assert list(res.kept_indices) == [0, 1]


def test_slice_errors():
    with pytest.raises(ValueError):
        slice_crop(PointCloud(np.zeros((1, 3))), direction=[1.0, 0, 0])
    with pytest.raises(ValueError):
        slice_crop(PointCloud(np.zeros((4, 3))))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda q: np.linalg.norm(q) > 0.1),
       st.integers(0, 2**31))
def test_slice_commutes_with_rotation(q, seed):
    r = quat_to_matrix(np.asarray(q) / np.linalg.norm(q))
    g = np.random.default_rng(seed)
    x = g.normal(size=(50, 3))
    v = g.normal(size=3)
    a = slice_crop(PointCloud(x), direction=v)
    b = slice_crop(PointCloud(x @ r.T), direction=r @ v)
    assert np.array_equal(a.kept_indices, b.kept_indices)
    assert np.abs(a.partial.points @ r.T - b.partial.points).max() <= 1e-12


def test_camera_basis_is_rotation():
    for pos in ([0, 0, 5.0], [3.0, -1, 2], [0, 0, -4.0]):
        b = camera_basis(pos)
        assert np.allclose(b @ b.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(b) == pytest.approx(1.0)
        assert np.allclose(b[2], -np.asarray(pos) / np.linalg.norm(pos))


def test_depth_crop_hides_points_behind_others():
    cam = np.array([0.0, 0.0, 6.0])
    grid = np.array([[x, y, 0.0] for x in np.linspace(-0.6, 0.6, 4) for y in np.linspace(-0.6, 0.6, 4)])
    behind = cam + 1.3 * (grid - cam)         # on the same camera rays, farther away
    x = np.concatenate([behind, grid])
    res = depth_camera_crop(PointCloud(x), cam, resolution=64)
    assert list(res.kept_indices) == list(range(16, 32))


def test_depth_crop_properties(rng):
    x = rng.normal(size=(400, 3))
    cam = np.array([4.0, 4.0, 4.0])
    res = depth_camera_crop(PointCloud(x), cam, resolution=16)
    assert 0 < len(res.kept_indices) <= 256
    assert np.array_equal(res.partial.points, x[res.kept_indices])
    thin = depth_camera_crop(PointCloud(x), cam, resolution=16, max_points=20)
    assert len(thin.kept_indices) == 20
    assert set(thin.kept_indices) <= set(res.kept_indices)


def test_depth_crop_errors(rng):
    x = rng.normal(size=(50, 3))
    with pytest.raises(ValueError):
        depth_camera_crop(PointCloud(x), [0.1, 0, 0])


def test_recenter_reexport(rng):
    c, mu = recenter(rng.normal(size=(5, 3)))
    assert np.abs(c.mean(0)).max() < 1e-15
