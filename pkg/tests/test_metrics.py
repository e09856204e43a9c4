import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from canonpose import metrics as MT
from canonpose.data import PointCloud
from canonpose.occlusion import slice_crop
from canonpose.so3 import random_rotation


def ellipsoid(rng, n=300, radii=(1.0, 0.5, 0.25)):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    pts = v * np.asarray(radii)
    return pts - pts.mean(0)


def test_chamfer_trivial_values(rng):
    x = rng.normal(size=(20, 3))
    assert MT.chamfer(x, x) == 0.0
    assert MT.chamfer([[0.0, 0, 0]], [[1.0, 0, 0]]) == 2.0
    with pytest.raises(ValueError):
        MT.chamfer(np.zeros((0, 3)), x)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 256), st.integers(1, 256), st.integers(0, 2**31))
def test_chamfer_matches_bruteforce_and_is_symmetric(n, m, seed):
    g = np.random.default_rng(seed)
    a, b = g.normal(size=(n, 3)), g.normal(size=(m, 3))
    assert MT.chamfer(a, b) == MT.chamfer_bruteforce(a, b)
    assert MT.chamfer(a, b) == pytest.approx(MT.chamfer(b, a), rel=1e-15)


def test_chamfer_large_clouds_match_bruteforce(rng):
    a, b = rng.normal(size=(900, 3)), rng.normal(size=(800, 3))
    assert MT.chamfer(a, b) == pytest.approx(MT.chamfer_bruteforce(a, b), rel=1e-14)


def test_ic_oracle_zero_identity_positive(rng):
    shapes = [PointCloud(ellipsoid(rng)) for _ in range(3)]
    assert MT.ic_metric(MT.oracle_canonicalizer, shapes, 8, seed=1).value < 1e-9
    ident = MT.ic_metric(MT.identity_canonicalizer, shapes, 8, seed=1)
    assert ident.value > 1e-3 and ident.n_samples == 24


def test_metrics_are_seed_deterministic(rng):
    shapes = [PointCloud(ellipsoid(rng)) for _ in range(4)]
    for fn in (lambda s: MT.ic_metric(MT.pca_canonicalizer, shapes, 4, seed=s),
               lambda s: MT.cc_metric(MT.pca_canonicalizer, shapes, 3, seed=s),
               lambda s: MT.gc_metric(MT.pca_frame, shapes, seed=s, n_pairs=4)):
        assert fn(7) == fn(7)


def test_cc_oracle_on_rotated_copies(rng):
    base = PointCloud(ellipsoid(rng))
    copies = [base.rotated(random_rotation(rng)) for _ in range(5)]
    assert MT.cc_metric(MT.oracle_canonicalizer, copies, 10, seed=0).value < 1e-9
    with pytest.raises(ValueError):
        MT.cc_metric(MT.oracle_canonicalizer, copies[:1], 3, seed=0)


def test_cc_never_compares_a_shape_with_itself(rng):
    # two distinct shapes: every comparison is cross-shape, so CC equals their distance
    a, b = PointCloud(ellipsoid(rng)), PointCloud(ellipsoid(rng, radii=(0.3, 0.3, 1.0)))
    rep = MT.cc_metric(MT.identity_canonicalizer, [a, b], 5, seed=0, rotate=False)
    assert rep.value == pytest.approx(MT.chamfer(a, b))


def test_gc_constant_and_oracle_frames(rng):
    shapes = [PointCloud(ellipsoid(rng)) for _ in range(5)]
    r = random_rotation(rng)
    assert MT.gc_metric(lambda c: r, shapes, seed=0).value < 1e-9
    assert MT.gc_metric(MT.oracle_frame, shapes, seed=0).value < 1e-9
    pca = MT.gc_metric(MT.pca_frame, [PointCloud(rng.normal(size=(200, 3))) for _ in range(5)], seed=3)
    assert np.isfinite(pca.value) and pca.value > 0
    with pytest.raises(ValueError):
        MT.gc_metric(MT.oracle_frame, shapes[:2], seed=0)


def test_te_examples(rng):
    crops = [slice_crop(PointCloud(rng.normal(size=(30, 3))), rng) for _ in range(4)]
    lookup = {id(c.partial): c.barycenter_offset for c in crops}
    assert MT.te_metric(lambda p: lookup[id(p)], crops).value == 0.0

    class Fake:
        def __init__(self, v):
            self.partial, self.barycenter_offset = None, v
    fakes = [Fake(0.3 * v / np.linalg.norm(v)) for v in rng.normal(size=(5, 3))]
    assert MT.te_metric(MT.zero_translation, fakes).value == pytest.approx(0.3)


def test_procrustes_exact_and_noisy(rng):
    x = rng.normal(size=(100, 3))
    r = random_rotation(rng)
    res = MT.procrustes_align(x, x @ r.T)
    assert np.abs(res.rotation - r).max() < 1e-10 and not res.degenerate
    sigma = 1e-3
    worst = 0.0
    for _ in range(50):
        y = x @ r.T + rng.normal(size=x.shape) * sigma
        rr = MT.procrustes_align(x, y).rotation
        worst = max(worst, MT.rmse(x @ rr.T, y))
    assert worst <= 3 * sigma


def test_procrustes_reflection_input_returns_proper_rotation(rng):
    x = rng.normal(size=(30, 3))
    y = x * np.array([1.0, 1.0, -1.0])
    res = MT.procrustes_align(x, y)
    assert np.linalg.det(res.rotation) == pytest.approx(1.0)
    assert np.allclose(res.rotation @ res.rotation.T, np.eye(3))


def test_procrustes_flags_degenerate_input():
    x = np.array([[1.0, 0, 0], [2.0, 0, 0], [-3.0, 0, 0]])
    assert MT.procrustes_align(x, x).degenerate


def test_registration_oracle_and_reflection(rng):
    base = PointCloud(ellipsoid(rng))
    pairs = [(base.rotated(random_rotation(rng)), base.rotated(random_rotation(rng))) for _ in range(3)]
    err, cd = MT.registration_eval(MT.oracle_frame, pairs)
    assert err < 1e-9 and cd < 1e-9
    # mirror-symmetric shape (x -> -x) and a frame composed with that mirror
    half = np.abs(rng.normal(size=(150, 3))) * [1.0, 0.6, 0.3] + [0.2, 0, 0]
    sym = np.concatenate([half, half * [-1.0, 1, 1]])
    mirror = np.diag([-1.0, 1.0, 1.0])
    src, tgt = PointCloud(sym), PointCloud(sym)
    frames = {id(src): np.eye(3), id(tgt): mirror}
    err, cd = MT.registration_eval(lambda c: frames[id(c)], [(src, tgt)])
    assert err > 0.1 and cd < 1e-20


def test_pca_ellipsoid_frame_is_sorted_axis_permutation(rng):
    pts = ellipsoid(rng, 2000, radii=(0.3, 1.0, 0.6))
    res = MT.pca_canonicalize(pts)
    expected = np.array([[0, 1, 0], [0, 0, 1], [1, 0, 0]], dtype=float)
    assert np.allclose(np.abs(res.frame), expected, atol=0.05)
    assert np.linalg.det(res.frame) == pytest.approx(1.0)
    assert not res.ambiguous


def test_pca_sign_convention_and_flip_ambiguity(rng):
    pts = rng.normal(size=(400, 3)) * [1.0, 0.6, 0.3]
    res = MT.pca_canonicalize(pts)
    for row in res.frame[:2]:
        assert row[np.argmax(np.abs(row))] > 0
    r = random_rotation(rng)
    other = MT.pca_canonicalize(pts @ r.T)
    assert MT.min_flip_chamfer(res.canonical, other.canonical) < 1e-8
    for s in MT.PROPER_SIGN_FLIPS:
        assert np.linalg.det(s) == 1


def test_pca_sphere_is_ambiguous():
    pts = np.concatenate([np.eye(3), -np.eye(3)])
    assert MT.pca_canonicalize(pts).ambiguous


def test_keypoint_transfer_identity(rng):
    x = rng.normal(size=(40, 3))
    seg = np.eye(3)[rng.integers(0, 3, size=40)]
    labels = np.full(40, -1)
    labels[[3, 17, 22]] = [0, 1, 2]
    res = MT.keypoint_transfer(x, labels, x, seg, seg)
    assert list(res.target_indices) == [3, 17, 22]
    assert not res.fallback.any()


def test_keypoint_transfer_scaled_target(rng):
    x = rng.normal(size=(50, 3))
    seg = np.eye(2)[(x[:, 0] > 0).astype(int)]
    labels = np.full(50, -1)
    labels[:10] = 1
    tgt = 1.5 * x
    res = MT.keypoint_transfer(x, labels, tgt, seg, seg)
    for n, i in enumerate(range(10)):
        p = seg[i].argmax()
        q = tgt[seg[:, p] == 1].mean(0) + (x[i] - x[seg[:, p] == 1].mean(0))
        d = ((tgt - q) ** 2).sum(-1)
        assert res.target_indices[n] == np.flatnonzero(d == d.min())[0]


def test_keypoint_transfer_empty_part_fallback(rng):
    x = rng.normal(size=(10, 3))
    seg_s = np.eye(2)[[0] * 5 + [1] * 5]
    seg_t = np.eye(2)[[0] * 10]
    labels = np.array([-1] * 9 + [4])
    res = MT.keypoint_transfer(x, labels, x, seg_s, seg_t)
    assert res.fallback.tolist() == [True]
    with pytest.raises(ValueError):
        MT.keypoint_transfer(x, labels, x, seg_s, np.ones((10, 3)))


def test_metric_report_csv_round_trip(tmp_path):
    reps = [MT.MetricReport("IC", "toy-plane/model", 0.125, 512, 7),
            MT.MetricReport("TE", "toy-plane/pca", 0.3, 32, None)]
    MT.write_reports(tmp_path / "m.csv", reps)
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "metric,category,value,n_samples,seed"
    assert MT.read_reports(tmp_path / "m.csv") == reps
    with pytest.raises(ValueError):
        MT.MetricReport("IC", "x", -1.0, 1)
    with pytest.raises(ValueError):
        MT.MetricReport("IC", "x", float("nan"), 1)
