"""Rotation-equivariant point-cloud layers.

Features are stored packed: a DiffTensor of shape ``(B, N, 16, C)`` whose
axis 2 concatenates the degree blocks ``l = 0..3`` (``so3.degree_slice``).
A rotation ``R`` of the input acts on it by ``so3.wigner_blocks(R)``.

The convolution is a tensor-field-network layer.  For a center ``i`` with
neighbors ``j``::

    out^lo_i = sum_{li, lf, s} W^lo[li, lf, s] . mean_j phi_s(|r_ij|) CG(Y^lf(r_ij/|r_ij|), f^li_j)

The geometry-dependent part (radial shell times harmonic, contracted with the
coupling tensor) is assembled as a constant numpy array per ``(li, lo)`` pair,
so only two matmuls per pair touch the autodiff graph.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .pointops import batched_fps, farthest_from_centroid, knn
from .so3 import DEGREES, SH_DIM, SphereSampling, cg_table, degree_slice, eval_sh, valid_triple

Params = dict  # name -> DiffTensor


@dataclass
class EquivariantFeatureMap:
    """Packed per-point features ``coeffs`` (B, N, 16, C) at ``points`` (B, N, 3)."""
    coeffs: DiffTensor
    points: np.ndarray

    @property
    def point_count(self) -> int:
        return self.coeffs.shape[1]

    @property
    def channels(self) -> int:
        return self.coeffs.shape[-1]

    def block(self, l: int) -> DiffTensor:
        return self.coeffs[:, :, degree_slice(l), :]


@dataclass(frozen=True)
class ConvSpec:
    """Static description of one convolution layer."""
    in_channels: int
    out_channels: int
    in_degrees: tuple = DEGREES
    k: int = 16
    shells: tuple = (0.1, 0.3, 0.6)
    shell_width: float = 0.2

    def paths(self, lo: int) -> list[tuple[int, int]]:
        """``(li, lf)`` pairs feeding output degree ``lo``, in weight-row order."""
        return [(li, lf) for li in self.in_degrees for lf in DEGREES if valid_triple(li, lf, lo)]

    def weight_rows(self, lo: int) -> int:
        return len(self.paths(lo)) * len(self.shells) * self.in_channels


@dataclass(frozen=True)
class BackboneConfig:
    widths: tuple = (32, 64, 64)
    centers: tuple = (128, 16, 8)
    k: int = 16
    shells: tuple = (0.1, 0.3, 0.6)
    shell_width: float = 0.2

    def conv_specs(self) -> list[ConvSpec]:
        specs, cin, degs = [], 1, (0,)
        for w in self.widths:
            specs.append(ConvSpec(cin, w, degs, self.k, tuple(self.shells), self.shell_width))
            cin, degs = w, DEGREES
        return specs


@dataclass
class ConvLayerParams:
    spec: ConvSpec
    weights: dict = field(default_factory=dict)  # lo -> (rows, C_out)
    bias: DiffTensor | None = None                # degree-0 bias (C_out,)


def _uniform(rng, fan_in, shape):
    lim = np.sqrt(3.0 / max(fan_in, 1))
    return ad.tensor(rng.uniform(-lim, lim, size=shape), requires_grad=True)


def init_conv(rng: np.random.Generator, spec: ConvSpec) -> ConvLayerParams:
    weights = {}
    for lo in DEGREES:
        rows = spec.weight_rows(lo)
        weights[lo] = _uniform(rng, rows, (rows, spec.out_channels))
    bias = ad.tensor(np.zeros(spec.out_channels), requires_grad=True)
    return ConvLayerParams(spec, weights, bias)


def conv_params_from(params: Params, prefix: str, spec: ConvSpec) -> ConvLayerParams:
    return ConvLayerParams(spec, {lo: params[f"{prefix}.w{lo}"] for lo in DEGREES},
                           params[f"{prefix}.b"])


def register_conv(params: Params, prefix: str, layer: ConvLayerParams) -> None:
    for lo, w in layer.weights.items():
        params[f"{prefix}.w{lo}"] = w
    params[f"{prefix}.b"] = layer.bias


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def cloud_radius(points) -> np.ndarray:
    """Per-cloud max distance from the centroid, shape (B,)."""
    points = np.asarray(points, dtype=np.float64)
    c = points - points.mean(axis=-2, keepdims=True)
    r = np.sqrt((c ** 2).sum(-1)).max(axis=-1)
    return np.where(r > 0, r, 1.0)


def conv_geometry(sources, centers, neighbors, radius, spec: ConvSpec) -> dict:
    """Constant filter tensors ``G[(li, lf, lo)]`` of shape ``(B*Q, (2lo+1)*S, k*(2li+1))``.

    ``sources`` (B, Ns, 3), ``centers`` (B, Q, 3), ``neighbors`` (B, Q, k) indices
    into ``sources``, ``radius`` (B,).
    """
    b, q, k = neighbors.shape
    nb = np.take_along_axis(sources[:, :, None, :], neighbors.reshape(b, q * k)[:, :, None, None], axis=1)
    rel = nb.reshape(b, q, k, 3) - centers[:, :, None, :]
    dist = np.sqrt((rel ** 2).sum(-1))
    unit = np.divide(rel, dist[..., None], out=np.zeros_like(rel), where=dist[..., None] > 0)
    mu = np.asarray(spec.shells)
    t = dist[..., None] / radius[:, None, None, None] - mu
    phi = np.exp(-0.5 * (t / spec.shell_width) ** 2) / k          # (B, Q, k, S)
    e = b * q
    ys = [y.reshape(e, k, -1) for y in eval_sh(unit.reshape(-1, 3))]
    n_s = len(spec.shells)
    phi_b = np.ascontiguousarray(phi.reshape(e, k, n_s).transpose(0, 2, 1))[:, None, :, :, None]
    table = cg_table()
    out = {}
    for lo in DEGREES:
        mo = 2 * lo + 1
        for li, lf in spec.paths(lo):
            mi = 2 * li + 1
            cg = table[(li, lf, lo)]
            if lf:
                # (E, mo, k, mi): filter harmonic coupled with each input component
                c = (ys[lf] @ cg.transpose(0, 2, 1)[:, None]).transpose(1, 0, 2, 3)
            else:
                c = np.broadcast_to(cg[None, :, None, :, 0], (e, mo, k, mi))
            g = np.empty((e, mo, n_s, k, mi))
            np.multiply(c[:, :, None], phi_b, out=g)
            out[(li, lf, lo)] = g.reshape(e, mo * n_s, k * mi)
    return out


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

def equivariant_conv(sources, feats: DiffTensor, center_idx, params: ConvLayerParams,
                     radius=None) -> EquivariantFeatureMap:
    """One TFN convolution from ``sources`` (B, Ns, 3) onto the subset ``center_idx`` (B, Q).

    ``feats`` is packed (B, Ns, 16, C_in).  Only relative offsets enter the filters.
    """
    spec = params.spec
    sources = np.asarray(sources, dtype=np.float64)
    b, ns, _ = sources.shape
    if spec.k > ns:
        raise ValueError(f"neighborhood size k={spec.k} exceeds point count {ns}")
    if feats.shape[:2] != (b, ns) or feats.shape[2] != SH_DIM or feats.shape[3] != spec.in_channels:
        raise ad.ShapeError("equivariant_conv", feats.shape, (b, ns, SH_DIM, spec.in_channels))
    center_idx = np.asarray(center_idx)
    q = center_idx.shape[1]
    centers = np.take_along_axis(sources, center_idx[:, :, None], axis=1)
    nbrs = knn(centers, sources, spec.k)
    radius = cloud_radius(sources) if radius is None else np.asarray(radius, dtype=np.float64)
    geo = conv_geometry(sources, centers, nbrs, radius, spec)

    flat_idx = (nbrs + ns * np.arange(b)[:, None, None]).reshape(-1)
    gathered = {}
    for li in spec.in_degrees:
        m = 2 * li + 1
        fl = ad.reshape(feats[:, :, degree_slice(li), :], (b * ns, m, spec.in_channels))
        gathered[li] = ad.reshape(ad.gather(fl, flat_idx, axis=0), (b * q, spec.k * m, spec.in_channels))

    outs = []
    for lo in DEGREES:
        mo = 2 * lo + 1
        parts = []
        for li, lf in spec.paths(lo):
            a = ad.matmul(geo[(li, lf, lo)], gathered[li])       # (BQ, mo*S, C)
            parts.append(ad.reshape(a, (b * q, mo, -1)))
        mixed = ad.concat(parts, axis=2) if len(parts) > 1 else parts[0]
        y = ad.matmul(ad.reshape(mixed, (b * q * mo, -1)), params.weights[lo])
        if lo == 0:
            y = y + params.bias
        outs.append(ad.reshape(y, (b, q, mo, spec.out_channels)))
    return EquivariantFeatureMap(ad.concat(outs, axis=2), centers)


def gate_nonlinearity(coeffs: DiffTensor) -> DiffTensor:
    """Scalars through ReLU; each higher-degree channel scaled by the sigmoid of its scalar.

    Exactly equivariant, since degree-0 channels are invariant.
    """
    s = coeffs[:, :, 0:1, :]
    rest = coeffs[:, :, 1:, :]
    return ad.concat([ad.relu(s), rest * ad.sigmoid(s)], axis=2)


def mlp_forward(x: DiffTensor, layers, activate_last: bool = True) -> DiffTensor:
    """Apply ``[(W, b), ...]`` on the last axis with ReLU between layers."""
    for i, (w, bias) in enumerate(layers):
        x = ad.matmul(x, w) + bias
        if activate_last or i < len(layers) - 1:
            x = ad.relu(x)
    return x


def init_mlp(rng, sizes) -> list:
    layers = []
    for fin, fout in zip(sizes[:-1], sizes[1:]):
        layers.append((_uniform(rng, fin, (fin, fout)), ad.tensor(np.zeros(fout), requires_grad=True)))
    return layers


def to_sphere(sampling: SphereSampling, coeffs) -> DiffTensor:
    """Coefficients (..., 16, C) to sphere values (..., n_dirs, C)."""
    return ad.matmul(sampling.isht_matrix, coeffs)


def from_sphere(sampling: SphereSampling, values) -> DiffTensor:
    return ad.matmul(sampling.sht_matrix, values)


def equivariant_nonlinearity(coeffs, sampling: SphereSampling, mlp_params,
                             activate_last: bool = True) -> DiffTensor:
    """isht, per-direction MLP, sht.  Output is projected back onto degrees <= 3."""
    values = to_sphere(sampling, ad.as_tensor(coeffs))
    return from_sphere(sampling, mlp_forward(values, mlp_params, activate_last))


def global_sphere_pool(coeffs, sampling: SphereSampling) -> DiffTensor:
    """Per-direction max over points: (B, N, 16, C) -> (B, n_dirs, C)."""
    coeffs = ad.as_tensor(coeffs)
    if coeffs.ndim != 4 or coeffs.shape[1] == 0:
        raise ValueError("global_sphere_pool needs at least one point")
    return ad.max_(to_sphere(sampling, coeffs), axis=1)


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------

def init_backbone(rng: np.random.Generator, config: BackboneConfig, prefix: str = "backbone") -> Params:
    params: Params = {}
    for i, spec in enumerate(config.conv_specs()):
        register_conv(params, f"{prefix}.conv{i}", init_conv(rng, spec))
    return params


def select_centers(points: np.ndarray, m: int) -> np.ndarray:
    """FPS indices (B, m) seeded at the point farthest from each centroid."""
    b, n, _ = points.shape
    if m >= n:
        return np.broadcast_to(np.arange(n), (b, n)).copy()
    return batched_fps(points, m, farthest_from_centroid(points))


def backbone_features(points, params: Params, config: BackboneConfig,
                      prefix: str = "backbone") -> EquivariantFeatureMap:
    """Three convolutions on a shrinking FPS hierarchy, gated between layers."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 2:
        pts = pts[None]
    b, n, _ = pts.shape
    radius = cloud_radius(pts)
    x = np.zeros((b, n, SH_DIM, 1))
    x[:, :, 0, 0] = 1.0
    feats = ad.tensor(x)
    specs = config.conv_specs()
    for i, spec in enumerate(specs):
        centers = select_centers(pts, config.centers[i])
        layer = conv_params_from(params, f"{prefix}.conv{i}", spec)
        fm = equivariant_conv(pts, feats, centers, layer, radius)
        feats = gate_nonlinearity(fm.coeffs) if i < len(specs) - 1 else fm.coeffs
        pts = fm.points
    return EquivariantFeatureMap(feats, pts)


def backbone_forward(points, params: Params, config: BackboneConfig, sampling: SphereSampling,
                     prefix: str = "backbone"):
    """Return ``(pooled sphere signal (B, n_dirs, C), last per-point feature map)``."""
    fm = backbone_features(points, params, config, prefix)
    return global_sphere_pool(fm.coeffs, sampling), fm
