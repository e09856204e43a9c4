import numpy as np
import pytest

from canonpose import data
from canonpose.data import PointCloud


@pytest.fixture(scope="module")
def planes():
    return data.gen_synthetic("toy-plane", 6, np.random.default_rng(3), n_val=2)


@pytest.mark.parametrize("family", data.FAMILIES)
def test_generated_clouds_are_normalized(family):
    man = data.gen_synthetic(family, 2, np.random.default_rng(0))
    for r in man.records:
        pts = r.cloud.points
        assert pts.shape == (1024, 3)
        assert np.abs(pts.mean(0)).max() < 1e-12
        assert np.linalg.norm(pts.max(0) - pts.min(0)) == pytest.approx(1.0, abs=1e-9)
        assert r.cloud.labels.shape == (1024,)
        assert np.array_equal(r.gt_frame, np.eye(3))


def test_generation_is_deterministic(planes):
    again = data.gen_synthetic("toy-plane", 6, np.random.default_rng(3), n_val=2)
    for a, b in zip(planes.records, again.records):
        assert a.id == b.id and np.array_equal(a.cloud.points, b.cloud.points)


def test_ids_unique_and_splits(planes):
    assert len({r.id for r in planes.records}) == 6
    assert [r.split for r in planes.records] == ["train"] * 4 + ["val"] * 2
    assert len(planes.clouds("val")) == 2


def test_plane_major_axis_is_fuselage(planes):
    for r in planes.records:
        pts = r.cloud.points
        w, v = np.linalg.eigh(np.cov(pts.T))
        if w[2] >= 2 * w[1]:
            assert abs(v[0, 2]) > 0.9


def test_generation_errors():
    with pytest.raises(ValueError):
        data.gen_synthetic("toy-plane", 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        data.gen_synthetic("teapot", 1, np.random.default_rng(0))


def test_xyz_round_trip(tmp_path, rng):
    pts = rng.normal(size=(1024, 3)) * 10 ** rng.uniform(-5, 5, size=(1024, 1))
    data.write_xyz(tmp_path / "a.xyz", pts)
    back = data.read_xyz(tmp_path / "a.xyz")
    assert np.array_equal(back.points, pts) and back.labels is None
    labels = rng.integers(0, 5, size=1024)
    data.write_xyz(tmp_path / "b.xyz", pts, labels)
    back = data.read_xyz(tmp_path / "b.xyz")
    assert np.array_equal(back.labels, labels)


def test_xyz_errors(tmp_path):
    (tmp_path / "empty.xyz").write_text("")
    with pytest.raises(ValueError):
        data.read_xyz(tmp_path / "empty.xyz")
    (tmp_path / "bad.xyz").write_text("1 2 3\n1 2 x\n")
    with pytest.raises(ValueError, match=":2:"):
        data.read_xyz(tmp_path / "bad.xyz")
    (tmp_path / "cols.xyz").write_text("1 2\n")
    with pytest.raises(ValueError, match=":1:"):
        data.read_xyz(tmp_path / "cols.xyz")


def test_augment_rotation(rng, planes):
    cloud = planes.records[0].cloud
    same, r = data.augment_rotation(cloud, rng, identity=True)
    assert np.array_equal(r, np.eye(3)) and np.array_equal(same.points, cloud.points)
    a, r1 = data.augment_rotation(cloud, rng)
    b, r2 = data.augment_rotation(a, rng)
    assert np.allclose(b.gt_rotation, r2 @ r1)
    assert np.allclose(b.points, cloud.points @ (r2 @ r1).T)
    assert np.abs(b.points.mean(0)).max() < 1e-12


def test_manifest_round_trip(tmp_path, planes):
    path = data.save_manifest(planes, tmp_path)
    back = data.load_manifest(path)
    assert [r.id for r in back.records] == [r.id for r in planes.records]
    assert [r.split for r in back.records] == [r.split for r in planes.records]
    for a, b in zip(back.records, planes.records):
        assert np.array_equal(a.cloud.points, b.cloud.points)
        assert np.array_equal(a.cloud.labels, b.cloud.labels)
    assert data.load_manifest(tmp_path).records[0].id == planes.records[0].id


def test_pointcloud_validation():
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((3, 3)), labels=[1, 2])
    c = PointCloud(np.arange(12.0).reshape(4, 3), labels=[0, 1, 2, 3])
    sub = c.subset([3, 1])
    assert list(sub.indices) == [3, 1] and list(sub.labels) == [3, 1]
    assert list(sub.subset([1]).indices) == [1]
