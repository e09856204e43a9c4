"""Canonicalization metrics, Chamfer distance, Procrustes and the PCA baseline.

Conventions used throughout:

* a *canonicalizer* maps a :class:`PointCloud` to a canonicalized ``(K, 3)`` array;
* a *frame function* maps a :class:`PointCloud` to a rotation ``F`` acting on
  column vectors, so the canonical cloud is ``X @ F.T`` and ``F(RX) = F(X) R^T``.

Chamfer distance is squared nearest-neighbor distance, mean-aggregated per set
and summed over both directions.  Every reduction runs in index order.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import model as M
from .data import PointCloud
from .pointops import nearest_sqdist
from .so3 import random_rotation

METRIC_COLUMNS = ("metric", "category", "value", "n_samples", "seed")


@dataclass(frozen=True)
class MetricReport:
    metric: str
    category: str
    value: float
    n_samples: int
    seed: int | None = None

    def __post_init__(self):
        if not np.isfinite(self.value) or self.value < 0:
            raise ValueError(f"{self.metric} must be finite and >= 0, got {self.value}")

    def row(self) -> list:
        return [self.metric, self.category, repr(float(self.value)), self.n_samples,
                "" if self.seed is None else self.seed]


def reports_to_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


def write_reports(path, reports) -> None:
    Path(path).write_text(reports_to_csv(reports))


def read_reports(path) -> list[MetricReport]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [MetricReport(r["metric"], r["category"], float(r["value"]), int(r["n_samples"]),
                         int(r["seed"]) if r["seed"] else None) for r in rows]


# ---------------------------------------------------------------------------
# chamfer
# ---------------------------------------------------------------------------

def _points(x) -> np.ndarray:
    pts = x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[-1] != 3:
        raise ValueError(f"expected (K, 3) points, got {pts.shape}")
    if len(pts) == 0:
        raise ValueError("chamfer distance of an empty cloud is undefined")
    return pts


def chamfer(a, b) -> float:
    a, b = _points(a), _points(b)
    return float(nearest_sqdist(a, b).mean() + nearest_sqdist(b, a).mean())


def chamfer_bruteforce(a, b) -> float:
    """O(|A||B|) reference implementation."""
    a, b = _points(a), _points(b)
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    return float(d.min(axis=1).mean() + d.min(axis=0).mean())


# ---------------------------------------------------------------------------
# canonicalizers and frame functions
# ---------------------------------------------------------------------------

def _as_cloud(x) -> PointCloud:
    return x if isinstance(x, PointCloud) else PointCloud(x)


def _centered(cloud: PointCloud) -> np.ndarray:
    return cloud.points - cloud.points.mean(axis=0)


def oracle_frame(cloud: PointCloud) -> np.ndarray:
    """Ground-truth frame: undoes the recorded pose (identity if none)."""
    return np.eye(3) if cloud.gt_rotation is None else cloud.gt_rotation.T


def oracle_canonicalizer(cloud: PointCloud) -> np.ndarray:
    return _centered(cloud) @ oracle_frame(cloud).T


def identity_canonicalizer(cloud: PointCloud) -> np.ndarray:
    return _centered(cloud)


def canonicalizer_from_frames(frame_fn: Callable) -> Callable:
    def canon(cloud):
        cloud = _as_cloud(cloud)
        return _centered(cloud) @ np.asarray(frame_fn(cloud)).T
    return canon


class ModelCanonicalizer:
    """Trained parameters as a canonicalizer, frame function and translation predictor.

    The ``*_many`` methods run the network in batches of equally sized clouds.
    With ``rotation`` set (the default) the selected frame is replaced by its
    nearest rotation, so canonicalized shapes keep their scale; otherwise the raw
    exported transform ``X E`` is applied.
    """

    def __init__(self, params: M.ModelParams, batch_size: int = 8, rotation: bool = True):
        self.params = params
        self.batch_size = batch_size
        self.rotation = rotation

    def _pose(self, result) -> np.ndarray:
        return M.orthonormalize(result.pose) if self.rotation else result.pose

    def results(self, clouds) -> list[M.CanonicalizationResult]:
        pts = [_centered(_as_cloud(c)) for c in clouds]
        out = []
        for start in range(0, len(pts), self.batch_size):
            chunk = pts[start:start + self.batch_size]
            if len({len(p) for p in chunk}) == 1:
                fo = M.forward(np.stack(chunk), self.params)
                out.extend(fo.result(i) for i in range(len(chunk)))
            else:
                out.extend(M.forward(p, self.params).result(0) for p in chunk)
        return out

    def canonicalize_many(self, clouds) -> list[np.ndarray]:
        return [_centered(_as_cloud(c)) @ self._pose(r)
                for r, c in zip(self.results(clouds), clouds)]

    def frames_many(self, clouds) -> list[np.ndarray]:
        return [self._pose(r).T for r in self.results(clouds)]

    def translations_many(self, clouds) -> list[np.ndarray]:
        return [r.amodal_translation for r in self.results(clouds)]

    def __call__(self, cloud) -> np.ndarray:
        return self.canonicalize_many([cloud])[0]

    def frame(self, cloud) -> np.ndarray:
        return self.frames_many([cloud])[0]

    def translation(self, cloud) -> np.ndarray:
        return self.translations_many([cloud])[0]


def _canonicalize_all(canonicalizer, clouds) -> list[np.ndarray]:
    many = getattr(canonicalizer, "canonicalize_many", None)
    if many is not None:
        return many(clouds)
    return [np.asarray(canonicalizer(c)) for c in clouds]


def _frames_all(frame_fn, clouds) -> list[np.ndarray]:
    many = getattr(frame_fn, "frames_many", None)
    if many is not None:
        return many(clouds)
    return [np.asarray(frame_fn(c)) for c in clouds]


# ---------------------------------------------------------------------------
# IC / CC / GC / TE
# ---------------------------------------------------------------------------

def ic_metric(canonicalizer, dataset, n_rotations: int = 120, rng=None, seed: int | None = None,
              category: str = "all") -> MetricReport:
    """Mean CD between the canonicalized rotated copies and the canonicalized original."""
    rng = np.random.default_rng(seed) if rng is None else rng
    clouds = [_as_cloud(c) for c in dataset]
    if not clouds:
        raise ValueError("ic_metric needs at least one shape")
    rots = [[random_rotation(rng) for _ in range(n_rotations)] for _ in clouds]
    base = _canonicalize_all(canonicalizer, clouds)
    total = 0.0
    for cloud, ref, rs in zip(clouds, base, rots):
        rotated = _canonicalize_all(canonicalizer, [cloud.rotated(r) for r in rs])
        total += sum(chamfer(c, ref) for c in rotated)
    n = len(clouds) * n_rotations
    return MetricReport("IC", category, total / n, n, seed)


def cc_metric(canonicalizer, dataset, n_compare: int = 120, rng=None, seed: int | None = None,
              category: str = "all", rotate: bool = True) -> MetricReport:
    """Mean CD between canonicalized shapes and randomly drawn partners (never themselves).

    With ``rotate`` every shape first receives its own random rotation.
    """
    rng = np.random.default_rng(seed) if rng is None else rng
    clouds = [_as_cloud(c) for c in dataset]
    n = len(clouds)
    if n < 2:
        raise ValueError("cc_metric needs at least two shapes")
    if rotate:
        clouds = [c.rotated(random_rotation(rng)) for c in clouds]
    canon = _canonicalize_all(canonicalizer, clouds)
    total, count = 0.0, 0
    for i in range(n):
        partners = rng.choice(n - 1, size=n_compare, replace=n_compare > n - 1)
        for j in partners:
            j = int(j) + (j >= i)
            total += chamfer(canon[i], canon[j])
            count += 1
    return MetricReport("CC", category, total / count, count, seed)


def gc_metric(frame_fn, aligned_dataset, rng=None, n_anchors: int = 64, n_pairs: int = 32,
              seed: int | None = None, category: str = "all") -> MetricReport:
    """Mean ``CD[F(X_j) X_i, F(X_k) X_i]`` over sampled triples of aligned shapes."""
    rng = np.random.default_rng(seed) if rng is None else rng
    clouds = [_as_cloud(c) for c in aligned_dataset]
    n = len(clouds)
    if n < 3:
        raise ValueError("gc_metric needs at least three shapes")
    frames = _frames_all(frame_fn, clouds)
    anchors = rng.choice(n, size=min(n_anchors, n), replace=False)
    total, count = 0.0, 0
    for i in anchors:
        x = _centered(clouds[i])
        for _ in range(n_pairs):
            j, k = rng.choice(n, size=2, replace=False)
            total += chamfer(x @ frames[j].T, x @ frames[k].T)
            count += 1
    return MetricReport("GC", category, total / count, count, seed)


def te_metric(translation_fn, crops, category: str = "all", seed: int | None = None) -> MetricReport:
    """Mean ``|T_pred - offset|`` over crops (objects with ``partial`` and ``barycenter_offset``)."""
    crops = list(crops)
    if not crops:
        raise ValueError("te_metric needs at least one crop")
    many = getattr(translation_fn, "translations_many", None)
    partials = [c.partial for c in crops]
    preds = many(partials) if many else [translation_fn(p) for p in partials]
    err = sum(float(np.linalg.norm(np.asarray(t) - c.barycenter_offset)) for t, c in zip(preds, crops))
    return MetricReport("TE", category, err / len(crops), len(crops), seed)


def zero_translation(_cloud) -> np.ndarray:
    return np.zeros(3)


# ---------------------------------------------------------------------------
# Procrustes and registration
# ---------------------------------------------------------------------------

@dataclass
class ProcrustesResult:
    rotation: np.ndarray
    degenerate: bool


def procrustes_align(x, y) -> ProcrustesResult:
    """Rotation ``R`` minimizing ``sum |y_i - R x_i|^2`` (proper, det +1)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2 or x.shape[1] != 3:
        raise ValueError(f"procrustes needs matching (K, 3) inputs, got {x.shape} and {y.shape}")
    cov = y.T @ x
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    r = u @ np.diag([1.0, 1.0, d]) @ vt
    degenerate = bool(s[1] <= 1e-12 * max(s[0], 1e-300) or (d < 0 and s[2] <= 1e-12 * s[0]))
    return ProcrustesResult(r, degenerate)


def rmse(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.sqrt(((a - b) ** 2).sum(-1).mean()))


def registration_eval(frame_fn, pairs) -> tuple[float, float]:
    """Register each source onto its target via ``F_tgt^T F_src``; return mean (RMSE, CD).

    ``pairs`` holds ``(source, target)`` clouds in point correspondence.
    """
    pairs = [(_as_cloud(s), _as_cloud(t)) for s, t in pairs]
    if not pairs:
        raise ValueError("registration_eval needs at least one pair")
    frames = _frames_all(frame_fn, [c for p in pairs for c in p])
    err, cd = 0.0, 0.0
    for n, (src, tgt) in enumerate(pairs):
        f_src, f_tgt = frames[2 * n], frames[2 * n + 1]
        moved = _centered(src) @ (f_tgt.T @ f_src).T
        ref = _centered(tgt)
        err += rmse(moved, ref)
        cd += chamfer(moved, ref)
    return err / len(pairs), cd / len(pairs)


# ---------------------------------------------------------------------------
# PCA baseline
# ---------------------------------------------------------------------------

@dataclass
class PcaFrame:
    frame: np.ndarray
    canonical: np.ndarray
    eigenvalues: np.ndarray
    ambiguous: bool


def pca_canonicalize(cloud, tol: float = 1e-9) -> PcaFrame:
    """Rows of the frame are covariance eigenvectors by decreasing eigenvalue.

    Each row's largest-magnitude entry is made positive (lowest index on ties),
    then the last row is flipped if needed so that ``det = +1``.
    """
    pts = _centered(_as_cloud(cloud))
    cov = pts.T @ pts / len(pts)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(-w, kind="stable")
    w, frame = w[order], v[:, order].T.copy()
    for row in frame:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1
    if np.linalg.det(frame) < 0:
        frame[2] *= -1
    scale = max(abs(w[0]), 1e-300)
    ambiguous = bool(np.any(np.abs(np.diff(w)) <= tol * scale) or w[0] <= tol)
    return PcaFrame(frame, pts @ frame.T, w, ambiguous)


def pca_frame(cloud) -> np.ndarray:
    return pca_canonicalize(cloud).frame


def pca_canonicalizer(cloud) -> np.ndarray:
    return pca_canonicalize(cloud).canonical


PROPER_SIGN_FLIPS = tuple(np.diag(s) for s in
                          ([1, 1, 1], [-1, -1, 1], [-1, 1, -1], [1, -1, -1]))


def min_flip_chamfer(a, b) -> float:
    """Smallest CD between ``a`` and ``b`` under the four proper axis sign flips."""
    a = _points(a)
    return min(chamfer(a @ s, b) for s in PROPER_SIGN_FLIPS)


# ---------------------------------------------------------------------------
# keypoint transfer
# ---------------------------------------------------------------------------

@dataclass
class TransferResult:
    target_indices: np.ndarray   # (n_labeled,) index into the target cloud
    labels: np.ndarray           # (K_target,) transferred labels, -1 where unlabeled
    fallback: np.ndarray         # (n_labeled,) True where the target part was empty


def _nearest_index(query, pts) -> int:
    d = ((pts - query) ** 2).sum(-1)
    return int(np.argmin(d))


def keypoint_transfer(source, source_labels, target, seg_source, seg_target) -> TransferResult:
    """Move labeled source points into the target through part-relative offsets.

    ``source_labels`` has one integer per source point, ``-1`` for unlabeled.
    Points belong to their argmax part; a labeled point keeps its offset from
    its part centroid and lands on the target point nearest to the matching
    target centroid plus that offset.  Empty target parts fall back to the
    target mean.
    """
    src = _points(source)
    tgt = _points(target)
    lab = np.asarray(source_labels, dtype=np.int64)
    ss, st = np.asarray(seg_source), np.asarray(seg_target)
    if lab.shape != (len(src),) or ss.shape[0] != len(src) or st.shape[0] != len(tgt):
        raise ValueError("labels and segmentations must match their clouds")
    if ss.shape[1] != st.shape[1]:
        raise ValueError("source and target segmentations need the same part count")
    part_s, part_t = ss.argmax(axis=1), st.argmax(axis=1)
    labeled = np.flatnonzero(lab >= 0)
    idx = np.empty(len(labeled), dtype=np.int64)
    fallback = np.zeros(len(labeled), dtype=bool)
    tgt_mean = tgt.mean(axis=0)
    for n, i in enumerate(labeled):
        p = part_s[i]
        offset = src[i] - src[part_s == p].mean(axis=0)
        members = part_t == p
        if members.any():
            anchor = tgt[members].mean(axis=0)
        else:
            anchor, fallback[n] = tgt_mean, True
        idx[n] = _nearest_index(anchor + offset, tgt)
    out = np.full(len(tgt), -1, dtype=np.int64)
    for n, i in enumerate(labeled):
        if out[idx[n]] < 0:
            out[idx[n]] = lab[i]
    return TransferResult(idx, out, fallback)
