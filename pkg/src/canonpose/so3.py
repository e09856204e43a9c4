"""Rotation group utilities for degrees 0..3.

Spherical harmonics are real solid harmonics (homogeneous polynomials) with
Racah normalization, so that ``sum_m Y^l_m(x)^2 = |x|^(2l)``.  Degree 1 is
ordered as ``(x, y, z)`` which makes ``D^1(R) = R``.  Degrees 2 and 3 follow the
usual ``m = -l..l`` ordering.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from math import factorial, sqrt

import numpy as np

L_MAX = 3
DEGREES = tuple(range(L_MAX + 1))
SH_DIM = (L_MAX + 1) ** 2  # 16


def degree_slice(l: int) -> slice:
    return slice(l * l, (l + 1) * (l + 1))


#: degree of each packed coefficient index
COEFF_DEGREE = np.concatenate([np.full(2 * l + 1, l) for l in DEGREES])


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------

def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-uniform rotation from a normalized 4D Gaussian (unit quaternion)."""
    return quat_to_matrix(rng.normal(size=4))


def random_rotations(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.stack([random_rotation(rng) for _ in range(n)])


def is_rotation(m, tol: float = 1e-10) -> bool:
    m = np.asarray(m)
    return (m.shape == (3, 3)
            and np.abs(m.T @ m - np.eye(3)).max() <= tol
            and abs(np.linalg.det(m) - 1.0) <= tol)


# ---------------------------------------------------------------------------
# spherical harmonics
# ---------------------------------------------------------------------------

def eval_sh(x, l_max: int = L_MAX) -> list[np.ndarray]:
    """Per-degree solid harmonics ``[Y^0(x), ..., Y^l_max(x)]`` of shape ``(..., 2l+1)``."""
    if l_max > L_MAX or l_max < 0:
        raise ValueError(f"l_max must be in [0, {L_MAX}], got {l_max}")
    x = np.asarray(x, dtype=np.float64)
    px, py, pz = x[..., 0], x[..., 1], x[..., 2]
    out = [np.ones(x.shape[:-1] + (1,))]
    if l_max >= 1:
        out.append(np.stack([px, py, pz], axis=-1))
    if l_max >= 2:
        r2 = px * px + py * py + pz * pz
        s3 = sqrt(3.0)
        out.append(np.stack([
            s3 * px * py,
            s3 * py * pz,
            0.5 * (3 * pz * pz - r2),
            s3 * px * pz,
            0.5 * s3 * (px * px - py * py),
        ], axis=-1))
    if l_max >= 3:
        a, b, c = sqrt(5 / 8), sqrt(15.0), sqrt(3 / 8)
        out.append(np.stack([
            a * py * (3 * px * px - py * py),
            b * px * py * pz,
            c * py * (5 * pz * pz - r2),
            0.5 * pz * (5 * pz * pz - 3 * r2),
            c * px * (5 * pz * pz - r2),
            0.5 * b * pz * (px * px - py * py),
            a * px * (px * px - 3 * py * py),
        ], axis=-1))
    return out


def eval_sh_packed(x) -> np.ndarray:
    """All degrees concatenated: shape ``(..., 16)``."""
    return np.concatenate(eval_sh(x), axis=-1)


# ---------------------------------------------------------------------------
# Wigner-D
# ---------------------------------------------------------------------------

@lru_cache(maxsize=1)
def _wigner_probe():
    # fixed generic points; 24 >= 2l+1 for every degree
    pts = np.random.default_rng(20240229).normal(size=(24, 3))
    pinvs = {l: np.linalg.pinv(y) for l, y in enumerate(eval_sh(pts))}
    return pts, pinvs


def wigner_d(r, l: int) -> np.ndarray:
    """Matrix ``D`` with ``Y^l(R x) = D @ Y^l(x)`` for all ``x``."""
    if not 0 <= l <= L_MAX:
        raise ValueError(f"degree must be in [0, {L_MAX}], got {l}")
    r = np.asarray(r, dtype=np.float64)
    if l == 0:
        return np.ones((1, 1))
    if l == 1:
        return r.copy()
    pts, pinvs = _wigner_probe()
    rotated = eval_sh(pts @ r.T, l)[l]
    return (pinvs[l] @ rotated).T


def wigner_blocks(r) -> np.ndarray:
    """Block-diagonal 16x16 matrix acting on packed coefficients."""
    out = np.zeros((SH_DIM, SH_DIM))
    for l in DEGREES:
        s = degree_slice(l)
        out[s, s] = wigner_d(r, l)
    return out


# ---------------------------------------------------------------------------
# Clebsch-Gordan
# ---------------------------------------------------------------------------

def complex_cg(j1: int, m1: int, j2: int, m2: int, j: int, m: int) -> float:
    """<j1 m1 j2 m2 | j m> for integer angular momenta (Racah formula)."""
    if m1 + m2 != m or not abs(j1 - j2) <= j <= j1 + j2:
        return 0.0
    if abs(m1) > j1 or abs(m2) > j2 or abs(m) > j:
        return 0.0
    f = factorial
    pre = sqrt((2 * j + 1) * f(j + j1 - j2) * f(j - j1 + j2) * f(j1 + j2 - j) / f(j1 + j2 + j + 1))
    pre *= sqrt(f(j + m) * f(j - m) * f(j1 - m1) * f(j1 + m1) * f(j2 - m2) * f(j2 + m2))
    total = 0.0
    for k in range(0, j1 + j2 + j + 1):
        den = [k, j1 + j2 - j - k, j1 - m1 - k, j2 + m2 - k, j - j2 + m1 + k, j - j1 - m2 + k]
        if min(den) < 0:
            continue
        prod = 1
        for d in den:
            prod *= f(d)
        total += (-1) ** k / prod
    return pre * total


@lru_cache(maxsize=1)
def _complex_to_real():
    """Per degree, Q with ``Y_real(x) = Q @ Y_complex(x)`` on the unit sphere."""
    from scipy.special import sph_harm_y

    rng = np.random.default_rng(7)
    pts = rng.normal(size=(64, 3))
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    theta = np.arccos(np.clip(pts[:, 2], -1, 1))
    phi = np.arctan2(pts[:, 1], pts[:, 0])
    real = eval_sh(pts)
    qs = {}
    for l in DEGREES:
        yc = np.stack([sph_harm_y(l, m, theta, phi) for m in range(-l, l + 1)], axis=1)
        qt, *_ = np.linalg.lstsq(yc, real[l].astype(complex), rcond=None)
        qs[l] = qt.T
    return qs


def valid_triple(l1: int, l2: int, l: int) -> bool:
    return all(0 <= d <= L_MAX for d in (l1, l2, l)) and abs(l1 - l2) <= l <= l1 + l2


@dataclass(frozen=True)
class CgTable:
    """Real-basis coupling tensors ``T[(l1, l2, l)]`` of shape ``(2l+1, 2l1+1, 2l2+1)``.

    Each tensor has unit Frobenius norm and satisfies
    ``einsum('mij,ia,jb->mab', T, D1, D2) == einsum('mn,nab->mab', D, T)``.
    """
    entries: dict = field(default_factory=dict)

    def __getitem__(self, key):
        if key not in self.entries:
            raise KeyError(f"invalid coupling triple {key}")
        return self.entries[key]

    def triples(self):
        return list(self.entries)


def _build_cg_table() -> CgTable:
    qs = _complex_to_real()
    entries = {}
    for l1 in DEGREES:
        for l2 in DEGREES:
            for l in DEGREES:
                if not valid_triple(l1, l2, l):
                    continue
                c = np.zeros((2 * l + 1, 2 * l1 + 1, 2 * l2 + 1))
                for i1, m1 in enumerate(range(-l1, l1 + 1)):
                    for i2, m2 in enumerate(range(-l2, l2 + 1)):
                        m = m1 + m2
                        if abs(m) <= l:
                            c[m + l, i1, i2] = complex_cg(l1, m1, l2, m2, l, m)
                q1inv = np.linalg.inv(qs[l1])
                q2inv = np.linalg.inv(qs[l2])
                t = np.einsum("mu,uab,ai,bj->mij", qs[l], c, q1inv, q2inv)
                t = t.real if np.abs(t.real).sum() >= np.abs(t.imag).sum() else t.imag
                t = t / np.linalg.norm(t)
                flat = t.reshape(-1)
                pivot = flat[np.argmax(np.abs(flat) > 1e-9 * np.abs(flat).max())]
                if pivot < 0:
                    t = -t
                t[np.abs(t) < 1e-14] = 0.0
                entries[(l1, l2, l)] = t
    return CgTable(entries)


@lru_cache(maxsize=1)
def cg_table() -> CgTable:
    return _build_cg_table()


def cg_contract(table: CgTable, f1, f2, l: int) -> np.ndarray:
    """Couple a degree-l1 vector and a degree-l2 vector into degree ``l``.

    Leading batch dimensions broadcast.
    """
    f1 = np.asarray(f1, dtype=np.float64)
    f2 = np.asarray(f2, dtype=np.float64)
    l1 = (f1.shape[-1] - 1) // 2
    l2 = (f2.shape[-1] - 1) // 2
    if not valid_triple(l1, l2, l) or f1.shape[-1] % 2 == 0 or f2.shape[-1] % 2 == 0:
        raise ValueError(f"invalid coupling triple ({l1}, {l2}, {l})")
    return np.einsum("mij,...i,...j->...m", table[(l1, l2, l)], f1, f2)


# ---------------------------------------------------------------------------
# sphere sampling and harmonic transforms
# ---------------------------------------------------------------------------

def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / n)
    azimuth = np.pi * (1.0 + sqrt(5.0)) * i
    return np.stack([np.cos(azimuth) * np.sin(polar),
                     np.sin(azimuth) * np.sin(polar),
                     np.cos(polar)], axis=-1)


@dataclass(frozen=True, eq=False)
class SphereSampling:
    """Directions on S^2 with the band-limited (l <= 3) transform pair.

    ``isht_matrix`` (n_dirs x 16) evaluates coefficients on the directions;
    ``sht_matrix`` (16 x n_dirs) is its least-squares inverse.
    """
    n_dirs: int
    dirs: np.ndarray
    sht_matrix: np.ndarray
    isht_matrix: np.ndarray


@lru_cache(maxsize=16)
def sphere_sampling(n_dirs: int = 32) -> SphereSampling:
    if n_dirs < SH_DIM:
        raise ValueError(f"need at least {SH_DIM} directions for degree {L_MAX}, got {n_dirs}")
    dirs = fibonacci_sphere(n_dirs)
    isht = eval_sh_packed(dirs)
    sht = np.linalg.pinv(isht)
    for a in (dirs, isht, sht):
        a.setflags(write=False)
    return SphereSampling(n_dirs=n_dirs, dirs=dirs, sht_matrix=sht, isht_matrix=isht)


def sht(sampling: SphereSampling, signal) -> np.ndarray:
    """Sphere values ``(..., n_dirs, C)`` -> coefficients ``(..., 16, C)``."""
    return np.matmul(sampling.sht_matrix, signal)


def isht(sampling: SphereSampling, coeffs) -> np.ndarray:
    """Coefficients ``(..., 16, C)`` -> sphere values ``(..., n_dirs, C)``."""
    return np.matmul(sampling.isht_matrix, coeffs)
