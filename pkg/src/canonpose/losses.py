"""Self-supervision objectives and their weighted total.

Every function accepts a single instance or a leading batch axis; batched
results are averaged over the batch.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor, svd3


@dataclass(frozen=True)
class LossWeights:
    canon: float = 2.0
    rest: float = 1.0
    ortho: float = 1.0
    sep: float = 0.8
    amod: float = 1.0
    seg_full: float = 0.1
    seg_partial: float = 0.1
    l1_reg: float = 0.1
    # True: l1_reg * mean |w| over all kernel entries; False: l1_reg * sum |w|
    l1_mean: bool = True

    def __post_init__(self):
        for f in fields(self):
            if f.type != "bool" and getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


def _batched(x: DiffTensor, ndim: int) -> DiffTensor:
    x = ad.as_tensor(x)
    return ad.reshape(x, (1, *x.shape)) if x.ndim == ndim else x


def canon_loss(frame, x_c, points) -> DiffTensor:
    """``(1/K) sum_i |E x_c_i - X_i|`` (not squared), averaged over the batch."""
    frame, x_c, points = _batched(frame, 2), _batched(x_c, 2), _batched(points, 2)
    if x_c.shape != points.shape or frame.shape[-2:] != (3, 3) or frame.shape[0] != x_c.shape[0]:
        raise ad.ShapeError("canon_loss", frame.shape, x_c.shape, points.shape)
    pred = ad.matmul(x_c, ad.transpose(frame))
    return ad.mean(ad.norm(pred - points, axis=-1))


def select_frames(frames: DiffTensor, selected) -> DiffTensor:
    """Pick ``frames[b, selected[b]]``; other frames receive no gradient."""
    frames = _batched(frames, 3)
    selected = np.atleast_1d(np.asarray(selected))
    return ad.getitem(frames, (np.arange(frames.shape[0]), selected))


def projection_targets(frames) -> np.ndarray:
    """``U V^T`` of each 3x3 frame (treated as constants)."""
    frames = np.asarray(frames, dtype=np.float64)
    if not np.all(np.isfinite(frames)):
        raise ValueError("ortho_loss: frames contain NaN or Inf")
    flat = frames.reshape(-1, 3, 3)
    out = np.empty_like(flat)
    for i, e in enumerate(flat):
        s = svd3(e)
        out[i] = s.u @ s.v.T
    return out.reshape(frames.shape)


def ortho_loss(frames) -> DiffTensor:
    """Mean over frames of ``|U V^T - E|_F`` with the target held fixed."""
    frames = ad.as_tensor(frames)
    target = projection_targets(frames.data)
    return ad.mean(ad.norm(ad.reshape(frames - target, (*frames.shape[:-2], 9)), axis=-1))


def separation_loss(frames) -> DiffTensor:
    """``-(1/(9P)) sum_{i != j} |E_i - E_j|_F`` over ordered pairs, averaged over the batch."""
    frames = _batched(frames, 3)
    b, p = frames.shape[:2]
    if p < 2:
        return ad.tensor(0.0)
    flat = ad.reshape(frames, (b, p, 9))
    diff = ad.reshape(flat, (b, p, 1, 9)) - ad.reshape(flat, (b, 1, p, 9))
    total = ad.sum_(ad.norm(diff, axis=-1))  # diagonal terms are exactly zero
    return ad.scale(total, -1.0 / (9.0 * p * b))


def restriction_loss(full_x_c, partial_x_c, kept_indices) -> DiffTensor:
    """Mean squared distance between the centered restriction of the full canonical
    shape and the centered canonical shape of the partial input."""
    full_x_c, partial_x_c = _batched(full_x_c, 2), _batched(partial_x_c, 2)
    kept = np.asarray(kept_indices)
    if kept.ndim == 1:
        kept = kept[None]
    if kept.shape[1] == 0:
        raise ValueError("restriction_loss: empty kept set")
    if kept.shape != partial_x_c.shape[:2]:
        raise ad.ShapeError("restriction_loss", full_x_c.shape, partial_x_c.shape, kept.shape)
    restricted = ad.take_along(full_x_c, kept[:, :, None].repeat(3, axis=2), axis=1)
    diff = ad.center(restricted) - ad.center(partial_x_c)
    return ad.mean(ad.sqnorm(diff, axis=-1))


def amodal_loss(translation, barycenter_offset) -> DiffTensor:
    """``|T - mean(O(X))|^2``, averaged over the batch."""
    t = _batched(translation, 1)
    off = np.asarray(barycenter_offset, dtype=np.float64).reshape(t.shape)
    return ad.mean(ad.sqnorm(t - off, axis=-1))


# ---------------------------------------------------------------------------
# segmentation
# ---------------------------------------------------------------------------

class SegFullLosses(NamedTuple):
    localization: DiffTensor
    equilibrium: DiffTensor
    part_distribution: DiffTensor
    centroids: DiffTensor
    degenerate: tuple  # (batch, part) pairs whose centroid fell back to the cloud mean

    @property
    def total(self) -> DiffTensor:
        return self.localization + self.equilibrium + self.part_distribution


def part_centroids(points, seg) -> tuple[DiffTensor, tuple]:
    """``theta_j = sum_i A_ij X_i`` with ``A_ij = S_ij / sum_i S_ij``: (B, C, 3)."""
    points = _batched(points, 2)
    seg = _batched(seg, 2)
    mass = ad.sum_(seg, axis=1)                                   # (B, C)
    dead = mass.data <= 1e-12
    safe = ad.add(mass, dead.astype(np.float64))
    weighted = ad.einsum("bkc,bkx->bcx", seg, points)
    theta = ad.div(weighted, ad.reshape(safe, (*safe.shape, 1)))
    flags = tuple(map(tuple, np.argwhere(dead)))
    if flags:
        fallback = np.broadcast_to(points.data.mean(axis=1, keepdims=True), theta.shape)
        keep = (~dead)[..., None].astype(np.float64)
        theta = theta * keep + fallback * (1.0 - keep)
    return theta, flags


def seg_losses_full(points, seg) -> SegFullLosses:
    points = _batched(points, 2)
    seg = _batched(seg, 2)
    b, k, c = seg.shape
    theta, flags = part_centroids(points, seg)
    diff = ad.reshape(points, (b, k, 1, 3)) - ad.reshape(theta, (b, 1, c, 3))
    d2 = ad.sqnorm(diff, axis=-1)                                 # (B, K, C)
    localization = ad.scale(ad.sum_(seg * d2), 1.0 / (b * k))
    share = ad.mean(seg, axis=1) - 1.0 / c
    equilibrium = ad.scale(ad.sum_(ad.square(share)), 1.0 / b)
    chamfer = ad.mean(ad.min_(d2, axis=2)) + ad.mean(ad.min_(d2, axis=1))
    return SegFullLosses(localization, equilibrium, chamfer, theta, flags)


def cosine_similarity(a, b, axis: int = -1) -> DiffTensor:
    """Cosine along ``axis``; zero when either vector has zero norm."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    num = ad.sum_(a * b, axis=axis)
    den = ad.norm(a, axis=axis) * ad.norm(b, axis=axis)
    zero = (den.data == 0).astype(np.float64)
    return ad.div(num, den + zero)


class SegPartialLosses(NamedTuple):
    part_restriction: DiffTensor
    part_directional: DiffTensor

    @property
    def total(self) -> DiffTensor:
        return self.part_restriction + self.part_directional


def seg_losses_partial(seg_full_kept, seg_partial, theta_full, theta_partial,
                       full_count: int) -> SegPartialLosses:
    """Cosine agreement of per-point part memberships and of centroid-pair directions."""
    sf, sp = _batched(seg_full_kept, 2), _batched(seg_partial, 2)
    tf, tp = _batched(theta_full, 2), _batched(theta_partial, 2)
    if sf.shape != sp.shape or tf.shape != tp.shape or tf.shape[1] != sf.shape[2]:
        raise ad.ShapeError("seg_losses_partial", sf.shape, sp.shape, tf.shape, tp.shape)
    b, _, c = sf.shape
    restriction = ad.scale(ad.sum_(cosine_similarity(sp, sf)), -2.0 / (full_count * b))
    iu, ju = np.triu_indices(c, k=1)
    if len(iu) == 0:
        return SegPartialLosses(restriction, ad.tensor(0.0))
    dir_full = ad.gather(tf, ju, axis=1) - ad.gather(tf, iu, axis=1)
    dir_part = ad.gather(tp, ju, axis=1) - ad.gather(tp, iu, axis=1)
    directional = ad.scale(ad.mean(cosine_similarity(dir_full, dir_part)), -1.0)
    return SegPartialLosses(restriction, directional)


# ---------------------------------------------------------------------------
# total
# ---------------------------------------------------------------------------

COMPONENTS = ("canon", "rest", "ortho", "sep", "amod", "seg_full", "seg_partial")


def l1_penalty(kernels, mean: bool = False) -> DiffTensor:
    """``sum |w|`` over every kernel entry, or the mean when ``mean`` is set."""
    kernels = list(kernels)
    total = ad.tensor(0.0)
    for w in kernels:
        total = total + ad.sum_(ad.abs_(w))
    if mean and kernels:
        total = ad.scale(total, 1.0 / sum(w.data.size for w in kernels))
    return total


def total_loss(components: dict, weights: LossWeights, kernels=()) -> tuple[DiffTensor, dict]:
    """Weighted sum plus the kernel L1 term.  Returns ``(total, weighted terms)``."""
    unknown = set(components) - set(COMPONENTS)
    if unknown:
        raise ValueError(f"unknown loss components: {sorted(unknown)}")
    terms = {}
    total = ad.tensor(0.0)
    for name in COMPONENTS:
        if name in components:
            term = ad.scale(ad.as_tensor(components[name]), getattr(weights, name))
            terms[name] = term
            total = total + term
    kernels = list(kernels)
    if kernels:
        term = ad.scale(l1_penalty(kernels, weights.l1_mean), weights.l1_reg)
        terms["l1"] = term
        total = total + term
    return total, terms
