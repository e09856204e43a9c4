"""Synthetic shape corpus with known canonical pose, plus XYZ and manifest I/O."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .pointops import farthest_point_sampling
from .so3 import random_rotation

FAMILIES = ("toy-plane", "toy-chair", "toy-table", "blob-cluster")
GENERATOR_VERSION = 1
N_POINTS = 1024
N_DENSE = 4096


@dataclass
class PointCloud:
    """``points`` (K, 3) with optional labels, source indices and applied pose."""
    points: np.ndarray
    labels: np.ndarray | None = None
    indices: np.ndarray | None = None
    gt_rotation: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError(f"points must be (K, 3), got {self.points.shape}")
        k = len(self.points)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (k,):
                raise ValueError("labels must have one entry per point")
        if self.indices is not None:
            self.indices = np.asarray(self.indices, dtype=np.int64)
            if self.indices.shape != (k,):
                raise ValueError("indices must have one entry per point")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        idx = np.asarray(idx, dtype=np.int64)
        base = self.indices if self.indices is not None else np.arange(len(self))
        return PointCloud(self.points[idx],
                          None if self.labels is None else self.labels[idx],
                          base[idx], self.gt_rotation)

    def rotated(self, r) -> "PointCloud":
        r = np.asarray(r, dtype=np.float64)
        gt = r if self.gt_rotation is None else r @ self.gt_rotation
        return replace(self, points=self.points @ r.T, gt_rotation=gt)


@dataclass
class ShapeRecord:
    id: str
    family: str
    params: dict
    cloud: PointCloud
    split: str = "train"

    @property
    def gt_frame(self) -> np.ndarray:
        return np.eye(3)


@dataclass
class DatasetManifest:
    records: list = field(default_factory=list)
    seed: int = 0
    version: int = GENERATOR_VERSION

    def split(self, name: str) -> list[ShapeRecord]:
        return [r for r in self.records if r.split == name]

    def clouds(self, split: str | None = None) -> list[np.ndarray]:
        recs = self.records if split is None else self.split(split)
        return [r.cloud.points for r in recs]


# ---------------------------------------------------------------------------
# surface samplers
# ---------------------------------------------------------------------------

def _box_area(size) -> float:
    a, b, c = size
    return 2 * (a * b + b * c + a * c)


def _sample_box(rng, n, center, size):
    """Uniform samples on the surface of an axis-aligned box."""
    size = np.asarray(size, dtype=np.float64)
    faces = np.array([size[1] * size[2]] * 2 + [size[0] * size[2]] * 2 + [size[0] * size[1]] * 2)
    face = rng.choice(6, size=n, p=faces / faces.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3))
    axis = face // 2
    u[np.arange(n), axis] = np.where(face % 2 == 0, -0.5, 0.5)
    return np.asarray(center) + u * size


def _ellipsoid_area(axes) -> float:
    # Knud Thomsen approximation
    p = 1.6075
    a, b, c = axes
    return 4 * np.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3) ** (1 / p)


def _sample_ellipsoid(rng, n, center, axes):
    """Area-uniform samples on an ellipsoid surface by rejection."""
    axes = np.asarray(axes, dtype=np.float64)
    a, b, c = axes
    bound = max(b * c, a * c, a * b)
    out = []
    while sum(len(o) for o in out) < n:
        u = rng.normal(size=(2 * n, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        dens = np.sqrt((b * c * u[:, 0]) ** 2 + (a * c * u[:, 1]) ** 2 + (a * b * u[:, 2]) ** 2)
        out.append(u[rng.uniform(size=2 * n) * bound < dens])
    return np.asarray(center) + np.concatenate(out)[:n] * axes


def _gaussian_blob(rng, n, center, cov):
    return rng.multivariate_normal(center, cov, size=n)


# each part: (kind, center, size-or-axes)

def _plane_parts(rng):
    length = rng.uniform(0.9, 1.2)
    radius = rng.uniform(0.1, 0.16)
    span = rng.uniform(1.3, 1.7)
    chord = rng.uniform(0.22, 0.32)
    wing_x = rng.uniform(0.0, 0.2) * length
    tail_span = rng.uniform(0.4, 0.6)
    fin_h = rng.uniform(0.25, 0.4)
    return [
        ("ellipsoid", (0.0, 0.0, 0.0), (length, radius, radius)),
        ("box", (wing_x, 0.0, 0.0), (chord, span, 0.03)),
        ("box", (-0.85 * length, 0.0, 0.0), (0.6 * chord, tail_span, 0.025)),
        ("box", (-0.85 * length, 0.0, fin_h / 2 + 0.5 * radius), (0.6 * chord, 0.025, fin_h)),
    ]


def _chair_parts(rng):
    w = rng.uniform(0.45, 0.6)
    d = rng.uniform(0.45, 0.6)
    h = rng.uniform(0.4, 0.55)
    back = rng.uniform(0.45, 0.7)
    t = 0.05
    leg = rng.uniform(0.04, 0.06)
    parts = [
        ("box", (0.0, 0.0, h), (d, w, t)),
        ("box", (-d / 2 + t / 2, 0.0, h + back / 2), (t, w, back)),
    ]
    for sx in (-1, 1):
        for sy in (-1, 1):
            parts.append(("box", (sx * (d / 2 - leg), sy * (w / 2 - leg), h / 2), (leg, leg, h)))
    return parts


def _table_parts(rng):
    w = rng.uniform(0.8, 1.1)
    d = rng.uniform(0.5, 0.7)
    h = rng.uniform(0.5, 0.7)
    t = rng.uniform(0.04, 0.06)
    leg = rng.uniform(0.04, 0.07)
    inset = rng.uniform(0.02, 0.08)
    parts = [("box", (0.0, 0.0, h), (w, d, t))]
    for sx in (-1, 1):
        for sy in (-1, 1):
            parts.append(("box", (sx * (w / 2 - leg - inset), sy * (d / 2 - leg - inset), h / 2),
                          (leg, leg, h)))
    return parts


def _blob_parts(rng):
    k = int(rng.integers(3, 7))
    parts = []
    for _ in range(k):
        a = rng.normal(size=(3, 3)) * 0.08
        parts.append(("blob", tuple(rng.normal(size=3) * 0.4), a @ a.T + 1e-3 * np.eye(3)))
    return parts


_PARTS = {"toy-plane": _plane_parts, "toy-chair": _chair_parts,
          "toy-table": _table_parts, "blob-cluster": _blob_parts}


def _part_weight(kind, size):
    if kind == "box":
        return _box_area(size)
    if kind == "ellipsoid":
        return _ellipsoid_area(size)
    return 1.0


def generate_shape(family: str, seed: int, n_points: int = N_POINTS, n_dense: int = N_DENSE):
    """Return ``(points, labels)`` for one instance; a pure function of ``(family, seed)``."""
    if family not in _PARTS:
        raise ValueError(f"unknown family {family!r}; choose from {', '.join(FAMILIES)}")
    rng = np.random.default_rng(seed)
    parts = _PARTS[family](rng)
    weights = np.array([_part_weight(kind, size) for kind, _, size in parts])
    counts = rng.multinomial(n_dense, weights / weights.sum())
    pts, labels = [], []
    for label, ((kind, center, size), n) in enumerate(zip(parts, counts)):
        if n == 0:
            continue
        if kind == "box":
            pts.append(_sample_box(rng, n, center, size))
        elif kind == "ellipsoid":
            pts.append(_sample_ellipsoid(rng, n, center, size))
        else:
            pts.append(_gaussian_blob(rng, n, center, size))
        labels.append(np.full(n, label))
    dense = np.concatenate(pts)
    lab = np.concatenate(labels)
    idx = farthest_point_sampling(dense, n_points, 0)
    return normalize(dense[idx]), lab[idx]


def normalize(points) -> np.ndarray:
    """Mean-center and scale to unit bounding-box diagonal."""
    points = np.asarray(points, dtype=np.float64)
    c = points - points.mean(axis=0)
    diag = np.linalg.norm(c.max(axis=0) - c.min(axis=0))
    if diag == 0:
        raise ValueError("cannot normalize a degenerate cloud")
    return c / diag


def gen_synthetic(family: str, n: int, rng: np.random.Generator, n_val: int = 0,
                  n_points: int = N_POINTS) -> DatasetManifest:
    """``n`` records of one family; the last ``n_val`` are tagged ``val``."""
    if n <= 0:
        raise ValueError(f"n must be positive, got {n}")
    if not 0 <= n_val <= n:
        raise ValueError("n_val must lie in [0, n]")
    if family not in _PARTS:
        raise ValueError(f"unknown family {family!r}; choose from {', '.join(FAMILIES)}")
    seeds = rng.integers(0, 2**62, size=n)
    records = []
    for i, s in enumerate(seeds):
        pts, labels = generate_shape(family, int(s), n_points)
        split = "val" if i >= n - n_val else "train"
        records.append(ShapeRecord(f"{family}-{i:05d}", family, {"seed": int(s)},
                                   PointCloud(pts, labels, np.arange(len(pts)), np.eye(3)), split))
    return DatasetManifest(records, seed=int(seeds[0]) if n else 0)


def augment_rotation(cloud: PointCloud, rng: np.random.Generator, identity: bool = False):
    """Return ``(R X, R)`` with the pose bookkeeping composed."""
    r = np.eye(3) if identity else random_rotation(rng)
    return cloud.rotated(r), r


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------

def write_xyz(path, cloud: PointCloud | np.ndarray, labels=None) -> None:
    if not isinstance(cloud, PointCloud):
        cloud = PointCloud(cloud, labels)
    lines = []
    for i, p in enumerate(cloud.points):
        row = " ".join(f"{v:.17g}" for v in p)
        if cloud.labels is not None:
            row += f" {int(cloud.labels[i])}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def read_xyz(path) -> PointCloud:
    pts, labels = [], []
    text = Path(path).read_text()
    for n, line in enumerate(text.splitlines(), start=1):
        fields_ = line.split()
        if not fields_:
            continue
        if len(fields_) not in (3, 4):
            raise ValueError(f"{path}:{n}: expected 3 or 4 columns, got {len(fields_)}")
        try:
            pts.append([float(v) for v in fields_[:3]])
            if len(fields_) == 4:
                labels.append(int(fields_[3]))
        except ValueError:
            raise ValueError(f"{path}:{n}: malformed line {line!r}") from None
    if not pts:
        raise ValueError(f"{path}: no points")
    if labels and len(labels) != len(pts):
        raise ValueError(f"{path}: label column present on some lines only")
    return PointCloud(np.array(pts), np.array(labels) if labels else None)


def save_manifest(manifest: DatasetManifest, out_dir) -> Path:
    out = Path(out_dir)
    (out / "points").mkdir(parents=True, exist_ok=True)
    entries = []
    for r in manifest.records:
        rel = f"points/{r.id}.xyz"
        write_xyz(out / rel, r.cloud)
        entries.append({"id": r.id, "family": r.family, "seed": r.params["seed"],
                        "split": r.split, "path": rel})
    doc = {"version": manifest.version, "seed": manifest.seed, "records": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text())
    if doc.get("version") != GENERATOR_VERSION:
        raise ValueError(f"unsupported manifest version {doc.get('version')}")
    ids = [e["id"] for e in doc["records"]]
    if len(set(ids)) != len(ids):
        raise ValueError("manifest ids are not unique")
    records = []
    for e in doc["records"]:
        cloud = read_xyz(path.parent / e["path"])
        cloud.indices = np.arange(len(cloud))
        cloud.gt_rotation = np.eye(3)
        records.append(ShapeRecord(e["id"], e["family"], {"seed": e["seed"]}, cloud, e["split"]))
    return DatasetManifest(records, doc["seed"], doc["version"])
