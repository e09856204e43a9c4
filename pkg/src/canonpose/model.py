"""Canonicalization network: equivariant global features, invariant shape, pose heads.

Given a mean-centered cloud ``X`` the backbone pools to a spherical signal, and
per-direction MLPs followed by a harmonic transform produce

* ``F``: global equivariant coefficients (degrees 0..3, 64 channels),
* ``E_p``: ``P`` candidate frames whose *columns* are type-1 vectors, so that
  ``E_p(RX) = R E_p(X)``,
* ``T``: a type-1 translation.

``H^l = Y^l(X) F^l`` is rotation invariant, the invariant shape is
``x_c = W (F^1)^T X`` and the segmentation is a softmax MLP over ``H``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import tfn
from .autodiff import DiffTensor
from .so3 import DEGREES, degree_slice, eval_sh_packed, sphere_sampling

CHANNEL_PRESETS = {64: (32, 64, 64), 256: (64, 128, 256)}


@dataclass(frozen=True)
class ModelConfig:
    channel_preset: int = 64
    centers: tuple = (128, 16, 8)
    k: int = 16
    shells: tuple = (0.1, 0.3, 0.6)
    shell_width: float = 0.2
    coeff_hidden: tuple = (128, 64)
    frame_hidden: tuple = (64,)
    translation_hidden: tuple = (64,)
    seg_hidden: tuple = (256, 128)
    n_frames: int = 5
    n_parts: int = 10
    sphere_dirs: int = 4096
    train_sphere_dirs: int = 512
    orthonormalize: bool = False

    def __post_init__(self):
        if self.channel_preset not in CHANNEL_PRESETS:
            raise ValueError(f"unknown channel preset {self.channel_preset}; "
                             f"choose from {sorted(CHANNEL_PRESETS)}")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")
        if self.sphere_dirs < 16 or self.train_sphere_dirs < 16:
            raise ValueError("sphere sampling needs at least 16 directions")

    @property
    def widths(self) -> tuple:
        return CHANNEL_PRESETS[self.channel_preset]

    @property
    def feature_channels(self) -> int:
        return self.coeff_hidden[-1]

    def backbone(self) -> tfn.BackboneConfig:
        return tfn.BackboneConfig(self.widths, tuple(self.centers), self.k,
                                  tuple(self.shells), self.shell_width)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class ModelParams:
    """Named learnable tensors plus the architecture that fixes their shapes."""
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def __getitem__(self, name) -> DiffTensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def kernels(self) -> list[DiffTensor]:
        """Weight matrices subject to the L1 penalty (biases excluded)."""
        return [t for n, t in self.tensors.items() if n.rsplit(".", 1)[-1].startswith("w")]

    def mlp(self, prefix: str) -> list:
        layers, i = [], 0
        while f"{prefix}{i}.w" in self.tensors:
            layers.append((self.tensors[f"{prefix}{i}.w"], self.tensors[f"{prefix}{i}.b"]))
            i += 1
        return layers

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()


def _add_mlp(tensors: dict, prefix: str, layers) -> None:
    for i, (w, b) in enumerate(layers):
        tensors[f"{prefix}{i}.w"] = w
        tensors[f"{prefix}{i}.b"] = b


def init_params(config: ModelConfig, rng: np.random.Generator) -> ModelParams:
    t = tfn.init_backbone(rng, config.backbone())
    c = config.widths[-1]
    cf = config.feature_channels
    _add_mlp(t, "coeff.mlp", tfn.init_mlp(rng, (c, *config.coeff_hidden)))
    _add_mlp(t, "frame.mlp", tfn.init_mlp(rng, (c, *config.frame_hidden, 3 * config.n_frames)))
    _add_mlp(t, "trans.mlp", tfn.init_mlp(rng, (c, *config.translation_hidden, 1)))
    lim = np.sqrt(3.0 / cf)
    t["shape.w"] = ad.tensor(rng.uniform(-lim, lim, size=(3, cf)), requires_grad=True)
    _add_mlp(t, "seg.mlp", tfn.init_mlp(rng, (len(DEGREES) * cf, *config.seg_hidden, config.n_parts)))
    return ModelParams(config, t)


# ---------------------------------------------------------------------------
# heads
# ---------------------------------------------------------------------------

def coefficient_head(pooled: DiffTensor, params: ModelParams, sampling) -> DiffTensor:
    """Pooled sphere signal (B, n, C) -> global coefficients F (B, 16, C_F)."""
    values = tfn.mlp_forward(pooled, params.mlp("coeff.mlp"), activate_last=True)
    return tfn.from_sphere(sampling, values)


def frame_head(pooled: DiffTensor, params: ModelParams, sampling, n_frames: int) -> DiffTensor:
    """Candidate frames (B, P, 3, 3); column ``c`` of frame ``p`` is vector ``3p + c``."""
    values = tfn.mlp_forward(pooled, params.mlp("frame.mlp"), activate_last=False)
    vec = tfn.from_sphere(sampling, values)[:, degree_slice(1), :]     # (B, 3, 3P)
    b = vec.shape[0]
    return ad.transpose(ad.reshape(vec, (b, 3, n_frames, 3)), (0, 2, 1, 3))


def translation_head(pooled: DiffTensor, params: ModelParams, sampling) -> DiffTensor:
    """Type-1 translation (B, 3)."""
    values = tfn.mlp_forward(pooled, params.mlp("trans.mlp"), activate_last=False)
    vec = tfn.from_sphere(sampling, values)[:, degree_slice(1), :]     # (B, 3, 1)
    return ad.reshape(vec, (vec.shape[0], 3))


def invariant_embedding(points, coeffs: DiffTensor) -> DiffTensor:
    """``H[b, i, (l, j)] = <F^l[:, j], Y^l(X_i)>`` concatenated over degrees: (B, K, 4 C_F)."""
    y = eval_sh_packed(np.asarray(points, dtype=np.float64))              # (B, K, 16)
    blocks = [ad.matmul(y[..., degree_slice(l)], coeffs[:, degree_slice(l), :]) for l in DEGREES]
    return ad.concat(blocks, axis=-1)


def invariant_shape_and_frame(points, coeffs: DiffTensor, w: DiffTensor):
    """Return ``(x_c (B, K, 3), canonical_frame (B, 3, 3))`` with frame ``W (F^1)^T``."""
    f1 = coeffs[:, degree_slice(1), :]                                    # (B, 3, C_F)
    frame = ad.einsum("ac,bmc->bam", w, f1)
    x_c = ad.matmul(ad.as_tensor(np.asarray(points, dtype=np.float64)), ad.transpose(frame))
    return x_c, frame


def segmentation_head(h: DiffTensor, params: ModelParams) -> DiffTensor:
    """Row-wise softmax of the segmentation MLP applied to the embedding ``H``."""
    logits = tfn.mlp_forward(h, params.mlp("seg.mlp"), activate_last=False)
    return ad.softmax(logits, axis=-1)


def segmentation_from_coeffs(points, coeffs: DiffTensor, params: ModelParams) -> DiffTensor:
    """Same as ``segmentation_head(invariant_embedding(points, coeffs))``.

    The first layer is linear in ``H = Y F``, so ``H W = Y (F W)`` contracts
    over 16 harmonic components instead of the full embedding width.
    """
    layers = params.mlp("seg.mlp")
    (w0, b0), rest = layers[0], layers[1:]
    cf = coeffs.shape[-1]
    y = eval_sh_packed(np.asarray(points, dtype=np.float64))
    mixed = ad.concat([ad.matmul(coeffs[:, degree_slice(l), :], w0[l * cf:(l + 1) * cf])
                       for l in DEGREES], axis=1)                  # (B, 16, hidden)
    x = ad.relu(ad.matmul(y, mixed) + b0) if rest else ad.matmul(y, mixed) + b0
    if rest:
        x = tfn.mlp_forward(x, rest, activate_last=False)
    return ad.softmax(x, axis=-1)


def frame_residuals(frames, x_c, points) -> np.ndarray:
    """``(1/K) sum_i |E_p x_c_i - X_i|`` for every frame: (B, P)."""
    frames = np.asarray(frames)
    pred = np.einsum("bpij,bkj->bpki", frames, np.asarray(x_c))
    return np.sqrt(((pred - np.asarray(points)[:, None]) ** 2).sum(-1)).mean(-1)


def select_frame(frames, x_c, points) -> np.ndarray:
    """Index of the frame with the smallest canonical residual (lowest index on ties)."""
    frames = np.asarray(frames)
    squeeze = frames.ndim == 3
    if squeeze:
        frames, x_c, points = frames[None], np.asarray(x_c)[None], np.asarray(points)[None]
    sel = np.argmin(frame_residuals(frames, x_c, points), axis=1)
    return int(sel[0]) if squeeze else sel


# ---------------------------------------------------------------------------
# full forward
# ---------------------------------------------------------------------------

@dataclass
class ForwardOutput:
    """Batched graph outputs of one forward pass."""
    points: np.ndarray          # (B, K, 3) mean-centered input
    coeffs: DiffTensor          # (B, 16, C_F)
    embedding: DiffTensor       # (B, K, 4 C_F)
    x_c: DiffTensor             # (B, K, 3)
    canonical_frame: DiffTensor  # (B, 3, 3)
    frames: DiffTensor          # (B, P, 3, 3)
    selected: np.ndarray        # (B,)
    translation: DiffTensor     # (B, 3)
    segmentation: DiffTensor    # (B, K, n_parts)

    def result(self, i: int = 0) -> "CanonicalizationResult":
        frames = self.frames.data[i]
        sel = int(self.selected[i])
        return CanonicalizationResult(
            x_c=self.x_c.data[i].copy(), frames=frames.copy(), selected=sel,
            canonical_frame=self.canonical_frame.data[i].copy(),
            amodal_translation=self.translation.data[i].copy(),
            segmentation=self.segmentation.data[i].copy())


@dataclass
class CanonicalizationResult:
    x_c: np.ndarray
    frames: np.ndarray
    selected: int
    canonical_frame: np.ndarray
    amodal_translation: np.ndarray
    segmentation: np.ndarray

    @property
    def pose(self) -> np.ndarray:
        return self.frames[self.selected]

    def canonicalize(self, centered_points) -> np.ndarray:
        """Exported transform: ``E_{p*}^T X`` applied row-wise."""
        return np.asarray(centered_points) @ self.pose


def orthonormalize(frame) -> np.ndarray:
    """Nearest rotation ``U V^T`` of a 3x3 matrix."""
    u, _, vt = np.linalg.svd(frame)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def forward(points, params: ModelParams, training: bool = False) -> ForwardOutput:
    """Run every head on mean-centered clouds ``points`` of shape (B, K, 3) or (K, 3)."""
    cfg = params.config
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 2:
        pts = pts[None]
    if pts.ndim != 3 or pts.shape[-1] != 3 or pts.shape[1] == 0:
        raise ValueError(f"expected (B, K, 3) points, got {pts.shape}")
    sampling = sphere_sampling(cfg.train_sphere_dirs if training else cfg.sphere_dirs)
    pooled, _ = tfn.backbone_forward(pts, params.tensors, cfg.backbone(), sampling)
    coeffs = coefficient_head(pooled, params, sampling)
    frames = frame_head(pooled, params, sampling, cfg.n_frames)
    if cfg.orthonormalize and not training:
        frames = ad.tensor(np.stack([[orthonormalize(e) for e in fb] for fb in frames.data]))
    translation = translation_head(pooled, params, sampling)
    h = invariant_embedding(pts, coeffs)
    x_c, cframe = invariant_shape_and_frame(pts, coeffs, params["shape.w"])
    seg = segmentation_from_coeffs(pts, coeffs, params)
    selected = select_frame(frames.data, x_c.data, pts)
    return ForwardOutput(pts, coeffs, h, x_c, cframe, frames, selected, translation, seg)


def canonicalize(points, params: ModelParams) -> tuple[np.ndarray, CanonicalizationResult]:
    """Center one cloud and return ``(E_{p*}^T X, result)``."""
    pts = np.asarray(points, dtype=np.float64)
    centered = pts - pts.mean(axis=0)
    res = forward(centered, params).result(0)
    return res.canonicalize(centered), res
