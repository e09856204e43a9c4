"""Partial views of a full cloud, with exact index bookkeeping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import PointCloud
from .pointops import farthest_point_sampling, recenter

__all__ = ["CropResult", "slice_crop", "depth_camera_crop", "recenter", "random_direction"]


@dataclass
class CropResult:
    """``partial.points`` equals ``full.points[kept_indices]`` bit for bit."""
    partial: PointCloud
    kept_indices: np.ndarray
    barycenter_offset: np.ndarray


def random_direction(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _result(full: PointCloud, kept) -> CropResult:
    kept = np.sort(np.asarray(kept, dtype=np.int64))
    offset = full.points[kept].mean(axis=0) - full.points.mean(axis=0)
    return CropResult(full.subset(kept), kept, offset)


def slice_crop(full: PointCloud, rng: np.random.Generator | None = None,
               direction=None) -> CropResult:
    """Keep the ``ceil(K/2)`` points with the lowest ``x . v`` (stable by index)."""
    k = len(full)
    if k < 2:
        raise ValueError(f"slice_crop needs at least 2 points, got {k}")
    if direction is None:
        if rng is None:
            raise ValueError("slice_crop needs either rng or direction")
        direction = random_direction(rng)
    v = np.asarray(direction, dtype=np.float64)
    order = np.argsort(full.points @ v, kind="stable")
    return _result(full, order[: (k + 1) // 2])


def camera_basis(position) -> np.ndarray:
    """Rows ``(right, up, forward)`` for a camera at ``position`` looking at the origin."""
    c = np.asarray(position, dtype=np.float64)
    fwd = -c / np.linalg.norm(c)
    hint = np.array([0.0, 0.0, 1.0]) if abs(fwd[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, hint)
    right /= np.linalg.norm(right)
    up = np.cross(fwd, right)
    return np.stack([right, up, fwd])


def depth_camera_crop(full: PointCloud, camera_position, resolution: int = 64,
                      max_points: int | None = None) -> CropResult:
    """Keep the nearest point in every occupied pixel of a pinhole depth image.

    The focal length makes the cloud's bounding sphere span about 80% of the
    image.  When ``max_points`` is set and more points survive, FPS thins them.
    """
    pts = full.points
    cam = np.asarray(camera_position, dtype=np.float64)
    mu = pts.mean(axis=0)
    radius = np.sqrt(((pts - mu) ** 2).sum(-1)).max()
    dist = np.linalg.norm(cam - mu)
    if dist <= radius:
        raise ValueError("camera must lie outside the cloud's bounding sphere")
    basis = camera_basis(cam - mu)
    local = (pts - cam) @ basis.T
    depth = local[:, 2]
    focal = 0.8 * (resolution / 2) * dist / max(radius, 1e-12)
    u = np.floor(focal * local[:, 0] / depth + resolution / 2).astype(np.int64)
    v = np.floor(focal * local[:, 1] / depth + resolution / 2).astype(np.int64)
    inside = (u >= 0) & (u < resolution) & (v >= 0) & (v < resolution) & (depth > 0)
    cand = np.flatnonzero(inside)
    if len(cand) == 0:
        raise ValueError("no points visible from the camera")
    pix = v[cand] * resolution + u[cand]
    order = np.lexsort((cand, depth[cand], pix))
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix[order][1:] != pix[order][:-1]
    kept = np.sort(cand[order][first])
    if max_points is not None and len(kept) > max_points:
        sub = pts[kept]
        start = int(np.argmax(((sub - sub.mean(axis=0)) ** 2).sum(-1)))
        kept = np.sort(kept[farthest_point_sampling(sub, max_points, start)])
    return _result(full, kept)
