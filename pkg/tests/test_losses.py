import numpy as np
import pytest

from canonpose import autodiff as ad
from canonpose import losses as L
from canonpose.selftest import loss_grad_cases
from canonpose.so3 import random_rotation


def t(x, grad=False):
    return ad.tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


def test_canon_loss_values(rng):
    x = rng.normal(size=(10, 3))
    assert L.canon_loss(np.eye(3), t(x), x).item() == pytest.approx(0.0, abs=1e-15)
    # E = 2I, x_c = X leaves residual X, so the loss is the mean point norm
    got = L.canon_loss(2 * np.eye(3), t(x), x).item()
    assert got == pytest.approx(np.linalg.norm(x, axis=1).mean())


def test_canon_loss_rotated_frame_with_matching_shape(rng):
    x = rng.normal(size=(2, 10, 3))
    r = random_rotation(rng)
    x_c = x @ r  # E x_c = R R^T x = x
    assert L.canon_loss(np.stack([r, r]), t(x_c), x).item() < 1e-14


def test_select_frames_routes_gradient(rng):
    frames = t(rng.normal(size=(2, 3, 3, 3)), grad=True)
    ad.backward(ad.sum_(L.select_frames(frames, np.array([1, 2]))))
    g = frames.grad
    assert g[0, 1].sum() == 9 and g[1, 2].sum() == 9 and np.count_nonzero(g) == 18


def test_ortho_loss_values(rng):
    r = np.stack([random_rotation(rng) for _ in range(3)])
    assert L.ortho_loss(t(r[None])).item() < 1e-14
    # 2R has projection R and residual norm |R|_F = sqrt(3)
    assert L.ortho_loss(t(2 * r[None])).item() == pytest.approx(np.sqrt(3))
    with pytest.raises(ValueError):
        L.ortho_loss(t(np.full((1, 1, 3, 3), np.nan)))


def test_separation_loss_values():
    frames = np.stack([np.eye(3), -np.eye(3)])[None]
    # two ordered pairs, each at Frobenius distance 2 sqrt(3)
    assert L.separation_loss(t(frames)).item() == pytest.approx(-4 * np.sqrt(3) / 18)
    assert L.separation_loss(t(np.eye(3)[None, None])).item() == 0.0


def test_restriction_loss_is_zero_for_exact_restriction(rng):
    full = rng.normal(size=(2, 12, 3))
    kept = np.sort(np.stack([rng.choice(12, 5, replace=False) for _ in range(2)]), axis=1)
    partial = np.take_along_axis(full, kept[:, :, None], axis=1) + 0.7  # constant shift
    assert L.restriction_loss(t(full), t(partial), kept).item() < 1e-28
    noisy = partial + rng.normal(size=partial.shape) * 0.1
    d = noisy - noisy.mean(axis=1, keepdims=True) - (partial - partial.mean(axis=1, keepdims=True))
    assert L.restriction_loss(t(full), t(noisy), kept).item() == pytest.approx((d ** 2).sum(-1).mean())
    with pytest.raises(ad.ShapeError):
        L.restriction_loss(t(full), t(partial[:, :4]), kept)


def test_amodal_loss_value():
    off = np.array([[0.3, 0.0, 0.0]])
    assert L.amodal_loss(t(np.zeros((1, 3))), off).item() == pytest.approx(0.09)
    assert L.amodal_loss(t(off), off).item() == 0.0


def one_hot(labels, c):
    return np.eye(c)[labels]


def test_part_centroids_hard_assignment(rng):
    x = rng.normal(size=(9, 3))
    labels = np.array([0, 0, 1, 1, 1, 0, 2, 2, 2])
    theta, flags = L.part_centroids(x, t(one_hot(labels, 4)))
    for j in range(3):
        assert np.allclose(theta.data[0, j], x[labels == j].mean(axis=0))
    assert flags == ((0, 3),)
    assert np.allclose(theta.data[0, 3], x.mean(axis=0))


def test_seg_full_losses_hard_balanced(rng):
    x = rng.normal(size=(8, 3))
    labels = np.repeat(np.arange(4), 2)
    out = L.seg_losses_full(x, t(one_hot(labels, 4)))
    cents = np.stack([x[labels == j].mean(axis=0) for j in range(4)])
    d2 = ((x[:, None] - cents[None]) ** 2).sum(-1)
    assert out.equilibrium.item() == pytest.approx(0.0, abs=1e-30)
    assert out.localization.item() == pytest.approx(d2[np.arange(8), labels].mean())
    assert out.part_distribution.item() == pytest.approx(d2.min(1).mean() + d2.min(0).mean())
    assert out.total.item() == pytest.approx(out.localization.item() + out.part_distribution.item())


def test_equilibrium_penalizes_imbalance():
    x = np.zeros((4, 3))
    out = L.seg_losses_full(x, t(one_hot(np.zeros(4, dtype=int), 2)))
    assert out.equilibrium.item() == pytest.approx(0.5)


def test_cosine_similarity_zero_norm():
    c = L.cosine_similarity(t([[0.0, 0.0], [1.0, 0.0]]), t([[1.0, 2.0], [2.0, 0.0]]))
    assert list(c.data) == [0.0, 1.0]


def test_seg_partial_losses_identical_inputs(rng):
    s = one_hot(rng.integers(0, 3, size=6), 3)
    theta = rng.normal(size=(3, 3))
    out = L.seg_losses_partial(t(s), t(s), t(theta), t(theta), full_count=12)
    assert out.part_restriction.item() == pytest.approx(-2 * 6 / 12)
    assert out.part_directional.item() == pytest.approx(-1.0)


def test_total_loss_weights_and_l1(rng):
    comps = {name: t(float(i + 1)) for i, name in enumerate(L.COMPONENTS)}
    w = L.LossWeights()
    k = [t(np.array([1.0, -2.0])), t(np.array([[3.0]]))]
    total, terms = L.total_loss(comps, w, k)
    assert set(terms) == {*L.COMPONENTS, "l1"}
    expected = sum(getattr(w, n) * (i + 1) for i, n in enumerate(L.COMPONENTS))
    assert terms["l1"].item() == pytest.approx(0.1 * 6 / 3)
    assert total.item() == pytest.approx(expected + 0.2)
    _, terms_sum = L.total_loss(comps, L.LossWeights(l1_mean=False), k)
    assert terms_sum["l1"].item() == pytest.approx(0.1 * 6)
    with pytest.raises(ValueError):
        L.total_loss({"bogus": t(1.0)}, w)


def test_default_weights():
    w = L.LossWeights()
    assert (w.canon, w.rest, w.ortho, w.sep, w.amod, w.seg_full, w.seg_partial, w.l1_reg) == \
        (2.0, 1.0, 1.0, 0.8, 1.0, 0.1, 0.1, 0.1)
    with pytest.raises(ValueError):
        L.LossWeights(canon=-1.0)


@pytest.mark.parametrize("seed", range(3))
def test_every_loss_passes_grad_check(seed):
    for name, fn, params in loss_grad_cases(np.random.default_rng(seed)):
        assert ad.grad_check(fn, params, eps=1e-5) < 1e-4, name
