"""Property suites shared by ``canonpose selftest`` and the acceptance tests.

Each suite returns a list of :class:`Check` records carrying the measured
error next to its tolerance.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import metrics as MT
from .data import PointCloud
from .model import ModelConfig, forward, init_params, orthonormalize
from .occlusion import random_direction, slice_crop
from .so3 import (DEGREES, cg_table, degree_slice, eval_sh, random_rotation, wigner_blocks,
                  wigner_d)


@dataclass
class Check:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error <= self.tol)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.error:.3e} (tol {self.tol:.0e})"


def _rel(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


# ---------------------------------------------------------------------------
# representation theory
# ---------------------------------------------------------------------------

def representation_suite(n_pairs: int = 50, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    ident = max(np.abs(wigner_d(np.eye(3), l) - np.eye(2 * l + 1)).max() for l in DEGREES)
    d1, hom, orth, sh = 0.0, 0.0, 0.0, 0.0
    for _ in range(n_pairs):
        r1, r2 = random_rotation(rng), random_rotation(rng)
        d1 = max(d1, np.abs(wigner_d(r1, 1) - r1).max())
        for l in DEGREES:
            a, b = wigner_d(r1, l), wigner_d(r2, l)
            hom = max(hom, np.abs(wigner_d(r1 @ r2, l) - a @ b).max())
            orth = max(orth, np.abs(a @ a.T - np.eye(2 * l + 1)).max())
    for _ in range(n_pairs):
        r = random_rotation(rng)
        x = rng.normal(size=3)
        for l, (y_rot, y) in enumerate(zip(eval_sh(r @ x), eval_sh(x))):
            sh = max(sh, np.abs(y_rot - wigner_d(r, l) @ y).max())
    table = cg_table()
    cg = 0.0
    for r in (random_rotation(rng) for _ in range(5)):
        for (l1, l2, l) in table.triples():
            t = table[(l1, l2, l)]
            lhs = np.einsum("mij,ia,jb->mab", t, wigner_d(r, l1), wigner_d(r, l2))
            rhs = np.einsum("mn,nab->mab", wigner_d(r, l), t)
            cg = max(cg, np.abs(lhs - rhs).max())
    return [Check("D(I) = I", ident, 1e-12), Check("D1(R) = R", d1, 1e-12),
            Check("homomorphism", hom, 1e-8), Check("orthogonality", orth, 1e-8),
            Check("Y(Rx) = D(R) Y(x)", sh, 1e-10),
            Check(f"CG intertwining ({len(table.triples())} triples)", cg, 1e-8)]


# ---------------------------------------------------------------------------
# network equivariance
# ---------------------------------------------------------------------------

def equivariance_suite(n_clouds: int = 5, n_rotations: int = 20, n_points: int = 64,
                       seed: int = 0, config: ModelConfig | None = None) -> list[Check]:
    """Worst relative residual of every equivariant / invariant output."""
    rng = np.random.default_rng(seed)
    params = init_params(config or ModelConfig(), np.random.default_rng([seed, 0]))
    worst = dict.fromkeys(("F", "H", "Xc", "S", "E", "T", "shift"), 0.0)
    for _ in range(n_clouds):
        x = rng.normal(size=(n_points, 3)) * rng.uniform(0.5, 1.5, size=3)
        x -= x.mean(axis=0)
        rots = np.stack([random_rotation(rng) for _ in range(n_rotations)])
        base = forward(x, params)
        out = forward(np.einsum("rij,kj->rki", rots, x), params)
        for i, r in enumerate(rots):
            d = wigner_blocks(r)
            for l in DEGREES:
                sl = degree_slice(l)
                ref = d[sl, sl] @ base.coeffs.data[0, sl]
                worst["F"] = max(worst["F"], _rel(out.coeffs.data[i, sl], ref))
            worst["H"] = max(worst["H"], _rel(out.embedding.data[i], base.embedding.data[0]))
            worst["Xc"] = max(worst["Xc"], _rel(out.x_c.data[i], base.x_c.data[0]))
            worst["S"] = max(worst["S"], _rel(out.segmentation.data[i], base.segmentation.data[0]))
            worst["E"] = max(worst["E"], _rel(out.frames.data[i], r @ base.frames.data[0]))
            worst["T"] = max(worst["T"], _rel(out.translation.data[i], r @ base.translation.data[0]))
        shifted = x + rng.normal(size=3) * 5
        moved = forward(shifted - shifted.mean(axis=0), params)
        for name in ("coeffs", "frames", "translation", "x_c", "segmentation"):
            worst["shift"] = max(worst["shift"], _rel(getattr(moved, name).data,
                                                      getattr(base, name).data))
    return [Check("F^l equivariance", worst["F"], 1e-3),
            Check("H invariance", worst["H"], 1e-3),
            Check("X^c invariance", worst["Xc"], 1e-3),
            Check("S invariance", worst["S"], 1e-3),
            Check("E_p equivariance", worst["E"], 1e-3),
            Check("T equivariance", worst["T"], 1e-3),
            Check("translation invariance after centering", worst["shift"], 1e-10)]


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------

def _param(rng, *shape, scale=1.0):
    return ad.tensor(rng.normal(size=shape) * scale, requires_grad=True)


def loss_grad_cases(rng):
    """``(name, scalar_fn, params)`` for every loss, on small random inputs."""
    b, k, kp, p, parts = 2, 7, 4, 3, 3
    pts = rng.normal(size=(b, k, 3))
    pts -= pts.mean(axis=1, keepdims=True)
    kept = np.sort(np.stack([rng.choice(k, kp, replace=False) for _ in range(b)]), axis=1)
    part_pts = np.take_along_axis(pts, kept[:, :, None], axis=1)
    part_pts = part_pts - part_pts.mean(axis=1, keepdims=True)
    frames = _param(rng, b, p, 3, 3)
    x_c = _param(rng, b, k, 3)
    xp = _param(rng, b, kp, 3)
    trans = _param(rng, b, 3)
    offset = rng.normal(size=(b, 3))
    logits = _param(rng, b, k, parts)
    logits_p = _param(rng, b, kp, parts)
    kernels = [_param(rng, 4, 3), _param(rng, 5)]
    sel = np.array([0, p - 1])

    def seg(t):
        return ad.softmax(t, axis=-1)

    def seg_full():
        return L.seg_losses_full(pts, seg(logits)).total

    def seg_partial():
        s_full = seg(logits)
        full = L.seg_losses_full(pts, s_full)
        theta_p, _ = L.part_centroids(part_pts, seg(logits_p))
        s_kept = ad.take_along(s_full, np.repeat(kept[:, :, None], parts, axis=2), axis=1)
        return L.seg_losses_partial(s_kept, seg(logits_p), full.centroids, theta_p, k).total

    def total():
        comp = {"canon": L.canon_loss(L.select_frames(frames, sel), x_c, pts),
                "ortho": L.ortho_loss(frames), "sep": L.separation_loss(frames),
                "rest": L.restriction_loss(x_c, xp, kept), "amod": L.amodal_loss(trans, offset),
                "seg_full": seg_full(), "seg_partial": seg_partial()}
        return L.total_loss(comp, L.LossWeights(), kernels)[0]

    return [
        ("canon", lambda: L.canon_loss(L.select_frames(frames, sel), x_c, pts), [frames, x_c]),
        ("ortho", lambda: L.ortho_loss(frames), [frames]),
        ("separation", lambda: L.separation_loss(frames), [frames]),
        ("restriction", lambda: L.restriction_loss(x_c, xp, kept), [x_c, xp]),
        ("amodal", lambda: L.amodal_loss(trans, offset), [trans]),
        ("segmentation (full)", seg_full, [logits]),
        ("segmentation (partial)", seg_partial, [logits, logits_p]),
        ("l1", lambda: L.l1_penalty(kernels), kernels),
        ("total", total, [frames, x_c, xp, trans, logits, logits_p, *kernels]),
    ]


def gradient_suite(n_seeds: int = 10, seed: int = 0, eps: float = 1e-5) -> list[Check]:
    worst: dict[str, float] = {}
    for s in range(n_seeds):
        for name, fn, params in loss_grad_cases(np.random.default_rng([seed, s])):
            worst[name] = max(worst.get(name, 0.0), ad.grad_check(fn, params, eps=eps))
    return [Check(f"grad_check {name} ({n_seeds} seeds)", err, 1e-4) for name, err in worst.items()]


# ---------------------------------------------------------------------------
# metric oracles
# ---------------------------------------------------------------------------

def _anisotropic_cloud(rng, n=256):
    return rng.normal(size=(n, 3)) * np.array([1.0, 0.6, 0.3])


def metric_suite(seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    cd = 0.0
    for _ in range(100):
        a = rng.normal(size=(int(rng.integers(1, 257)), 3))
        b = rng.normal(size=(int(rng.integers(1, 257)), 3))
        cd = max(cd, abs(MT.chamfer(a, b) - MT.chamfer_bruteforce(a, b)))
    shapes = [PointCloud(_anisotropic_cloud(rng, 128)) for _ in range(4)]
    shapes = [PointCloud(s.points - s.points.mean(axis=0)) for s in shapes]
    ic = MT.ic_metric(MT.oracle_canonicalizer, shapes, n_rotations=8, seed=seed).value
    instance = shapes[0]
    copies = [instance.rotated(random_rotation(rng)) for _ in range(6)]
    cc = MT.cc_metric(MT.oracle_canonicalizer, copies, n_compare=5, seed=seed).value
    gc = MT.gc_metric(MT.oracle_frame, shapes, seed=seed, n_pairs=8).value
    crops = [slice_crop(s, direction=random_direction(rng)) for s in shapes]
    te = MT.te_metric(lambda c, it=iter(crops): next(it).barycenter_offset, crops).value
    proc = 0.0
    for _ in range(20):
        x = rng.normal(size=(50, 3))
        r = random_rotation(rng)
        proc = max(proc, np.abs(MT.procrustes_align(x, x @ r.T).rotation - r).max())
    flip = 0.0
    for _ in range(20):
        x = _anisotropic_cloud(rng)
        r = random_rotation(rng)
        a = MT.pca_canonicalize(x).canonical
        b = MT.pca_canonicalize(x @ r.T).canonical
        flip = max(flip, MT.min_flip_chamfer(a, b))
    return [Check("chamfer == brute force (100 pairs)", cd, 0.0),
            Check("oracle IC", ic, 1e-9), Check("oracle CC (rotated copies)", cc, 1e-9),
            Check("oracle GC", gc, 1e-9), Check("oracle TE", te, 1e-9),
            Check("Procrustes recovery", proc, 1e-10),
            Check("PCA min sign-flip CD", flip, 1e-8)]


# ---------------------------------------------------------------------------
# crop commutativity
# ---------------------------------------------------------------------------

def crop_commutativity_suite(n_trials: int = 20, seed: int = 0, n_points: int = 256) -> list[Check]:
    """Rotating by the predicted frame and slicing commute (same indices, same points)."""
    rng = np.random.default_rng(seed)
    params = init_params(ModelConfig(), np.random.default_rng([seed, 0]))
    worst, index_mismatch = 0.0, 0
    for _ in range(n_trials):
        x = rng.normal(size=(n_points, 3)) * rng.uniform(0.3, 1.0, size=3)
        x -= x.mean(axis=0)
        res = forward(x, params).result(0)
        f = orthonormalize(res.pose.T)
        v = random_direction(rng)
        crop_then_frame = slice_crop(PointCloud(x), direction=v)
        frame_then_crop = slice_crop(PointCloud(x @ f.T), direction=f @ v)
        index_mismatch += int(not np.array_equal(crop_then_frame.kept_indices,
                                                 frame_then_crop.kept_indices))
        worst = max(worst, np.abs(crop_then_frame.partial.points @ f.T
                                  - frame_then_crop.partial.points).max())
    return [Check(f"frame . crop == crop . frame ({n_trials} trials)", worst, 1e-12),
            Check("crop indices agree", float(index_mismatch), 0.0)]


SUITES = {
    "representation": representation_suite,
    "equivariance": equivariance_suite,
    "gradients": gradient_suite,
    "metrics": metric_suite,
    "crop": crop_commutativity_suite,
}


def run_all(quick: bool = False, seed: int = 0, out=print) -> bool:
    kwargs = {
        "representation": {"n_pairs": 10 if quick else 50},
        "equivariance": {"n_clouds": 1, "n_rotations": 4} if quick else {},
        "gradients": {"n_seeds": 2 if quick else 10},
        "metrics": {},
        "crop": {"n_trials": 5} if quick else {},
    }
    ok = True
    for name, suite in SUITES.items():
        t0 = time.perf_counter()
        checks = suite(seed=seed, **kwargs[name])
        out(f"[{name}] {time.perf_counter() - t0:.1f}s")
        for c in checks:
            out("  " + c.line())
            ok &= c.passed
    out("selftest " + ("passed" if ok else "FAILED"))
    return ok
