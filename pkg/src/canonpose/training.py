"""Two-branch self-supervised training with Adam, a step schedule, and checkpoints."""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import losses as L
from .data import PointCloud, augment_rotation
from .model import ModelConfig, ModelParams, forward, init_params
from .occlusion import depth_camera_crop, random_direction, slice_crop
from .pointops import farthest_point_sampling

MAGIC = "CANONPOSE-CHECKPOINT"
FORMAT_VERSION = 1
LOSS_COLUMNS = ("canon", "rest", "ortho", "sep", "amod", "seg_full", "seg_partial", "l1", "total")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    iterations: int = 2000
    lr: float = 6e-4
    lr_decay: float = 0.1
    lr_decay_every: int | None = None  # None -> iterations // 3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    k_full: int = 1024
    k_partial: int = 512
    crop: str = "slice"
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: L.LossWeights = field(default_factory=L.LossWeights)

    def __post_init__(self):
        for name in ("batch_size", "iterations", "k_full", "k_partial"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lr_decay_every is not None and not 0 < self.lr_decay_every <= self.iterations:
            raise ValueError("lr_decay_every must lie in (0, iterations]")
        if self.crop not in ("slice", "depth"):
            raise ValueError(f"crop must be 'slice' or 'depth', got {self.crop!r}")

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return replace(cls(batch_size=8, iterations=2000), **overrides)

    @property
    def decay_every(self) -> int:
        return self.lr_decay_every or max(1, self.iterations // 3)

    @property
    def n_frames(self) -> int:
        return self.model.n_frames

    def lr_at(self, step: int) -> float:
        return self.lr * self.lr_decay ** (step // self.decay_every)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["model"] = self.model.to_dict()
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "weights" in d:
            d["weights"] = L.LossWeights(**d["weights"])
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


class NonFiniteError(RuntimeError):
    pass


def optimizer_step(params: ModelParams, state: OptimizerState, config: TrainConfig) -> float:
    """One Adam update in place using each tensor's ``.grad``.  Returns the lr used."""
    lr = config.lr_at(state.step)
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    for name, p in params.tensors.items():
        g = p.grad
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data -= lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + config.eps)
    return lr


# ---------------------------------------------------------------------------
# one iteration
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    full: np.ndarray        # (B, K, 3) rotated, centered
    partial: np.ndarray     # (B, Kp, 3) rotated crop, centered
    kept: np.ndarray        # (B, Kp) indices into full
    offset: np.ndarray      # (B, 3) crop barycenter in full-centered coordinates
    rotations: np.ndarray   # (B, 3, 3)


def _fit_count(kept: np.ndarray, points: np.ndarray, n: int) -> np.ndarray:
    if len(kept) > n:
        sub = points[kept]
        start = int(np.argmax(((sub - sub.mean(axis=0)) ** 2).sum(-1)))
        return np.sort(kept[farthest_point_sampling(sub, n, start)])
    if len(kept) < n:
        return np.sort(np.resize(kept, n))
    return kept


def make_batch(clouds, rng: np.random.Generator, config: TrainConfig) -> Batch:
    idx = rng.choice(len(clouds), size=config.batch_size, replace=len(clouds) < config.batch_size)
    full, part, kept_all, offs, rots = [], [], [], [], []
    for i in idx:
        pts = np.asarray(clouds[i], dtype=np.float64)
        if len(pts) != config.k_full:
            pts = pts[farthest_point_sampling(pts, config.k_full, 0)]
        cloud, r = augment_rotation(PointCloud(pts - pts.mean(axis=0)), rng)
        if config.crop == "slice":
            crop = slice_crop(cloud, direction=random_direction(rng))
        else:
            radius = np.sqrt((cloud.points ** 2).sum(-1)).max()
            crop = depth_camera_crop(cloud, random_direction(rng) * 2.5 * radius)
        kept = _fit_count(crop.kept_indices, cloud.points, config.k_partial)
        sel = cloud.points[kept]
        full.append(cloud.points)
        part.append(sel - sel.mean(axis=0))
        kept_all.append(kept)
        offs.append(sel.mean(axis=0) - cloud.points.mean(axis=0))
        rots.append(r)
    return Batch(np.stack(full), np.stack(part), np.stack(kept_all), np.stack(offs), np.stack(rots))


def compute_losses(params: ModelParams, batch: Batch, config: TrainConfig):
    """Forward both branches and return ``(total, weighted terms, raw components)``."""
    fo = forward(batch.full, params, training=True)
    po = forward(batch.partial, params, training=True)
    comp = {}
    canon, ortho, sep = [], [], []
    for out in (fo, po):
        chosen = L.select_frames(out.frames, out.selected)
        canon.append(L.canon_loss(chosen, out.x_c, out.points))
        ortho.append(L.ortho_loss(out.frames))
        sep.append(L.separation_loss(out.frames))
    comp["canon"] = ad.scale(canon[0] + canon[1], 0.5)
    comp["ortho"] = ad.scale(ortho[0] + ortho[1], 0.5)
    comp["sep"] = ad.scale(sep[0] + sep[1], 0.5)
    comp["rest"] = L.restriction_loss(fo.x_c, po.x_c, batch.kept)
    comp["amod"] = L.amodal_loss(po.translation, batch.offset)
    seg_full = L.seg_losses_full(fo.points, fo.segmentation)
    comp["seg_full"] = seg_full.total
    theta_p, _ = L.part_centroids(po.points, po.segmentation)
    s_kept = ad.take_along(fo.segmentation, np.repeat(batch.kept[:, :, None],
                                                       fo.segmentation.shape[-1], axis=2), axis=1)
    comp["seg_partial"] = L.seg_losses_partial(s_kept, po.segmentation, seg_full.centroids,
                                               theta_p, fo.points.shape[1]).total
    total, terms = L.total_loss(comp, config.weights, params.kernels())
    return total, terms, comp, (fo, po)


def train_iteration(clouds, params: ModelParams, state: OptimizerState, config: TrainConfig,
                    rng: np.random.Generator) -> dict:
    """Sample a batch, take one Adam step, and return the loss breakdown."""
    batch = make_batch(clouds, rng, config)
    params.zero_grad()
    total, terms, _, _ = compute_losses(params, batch, config)
    for name, t in terms.items():
        if not np.isfinite(t.data).all():
            raise NonFiniteError(f"loss term {name} is not finite")
    ad.backward(total)
    try:
        lr = optimizer_step(params, state, config)
    except NonFiniteError as e:
        raise NonFiniteError(f"{e} (terms: {', '.join(f'{k}={float(v.data):.4g}' for k, v in terms.items())})")
    row = {name: float(terms[name].data) for name in LOSS_COLUMNS if name in terms}
    row["total"] = float(total.data)
    row["lr"] = lr
    return row


@dataclass
class TrainResult:
    params: ModelParams
    state: OptimizerState
    history: list


def train(clouds, config: TrainConfig, checkpoint_path=None, log: Callable[[str], None] | None = None,
          log_every: int = 100) -> TrainResult:
    """Train from scratch on mean-centered canonical clouds."""
    if len(clouds) == 0:
        raise ValueError("training set is empty")
    params = init_params(config.model, np.random.default_rng([config.seed, 0]))
    rng = np.random.default_rng([config.seed, 1])
    state = OptimizerState()
    history = []
    for it in range(config.iterations):
        row = train_iteration(clouds, params, state, config, rng)
        row["step"] = it
        history.append(row)
        if log and (it % log_every == 0 or it == config.iterations - 1):
            log(f"step {it:5d} lr {row['lr']:.2e} total {row['total']:.4f} canon {row['canon']:.4f}")
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params, config, state.step)
    return TrainResult(params, state, history)


def write_loss_csv(path, history) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "lr", *LOSS_COLUMNS])
    for row in history:
        w.writerow([row["step"], repr(row["lr"]), *(repr(row.get(c, 0.0)) for c in LOSS_COLUMNS)])
    Path(path).write_text(buf.getvalue())


def smoothed(values, window: int = 100) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    kind: str
    config: dict
    step: int
    params: ModelParams | None


def _header(kind: str, config: dict, step: int, shapes: list) -> bytes:
    lines = [MAGIC, f"version {FORMAT_VERSION}", f"kind {kind}",
             f"config {json.dumps(config, sort_keys=True, separators=(',', ':'))}",
             f"step {step}", f"tensors {len(shapes)}"]
    for name, shape in shapes:
        lines.append(f"tensor {name} {','.join(str(s) for s in shape) or '-'}")
    lines.append("end")
    return ("\n".join(lines) + "\n").encode("ascii")


def save_checkpoint(path, params: ModelParams, config: TrainConfig, step: int) -> None:
    names = params.names()
    shapes = [(n, params[n].shape) for n in names]
    out = bytearray(_header("model", config.to_dict(), step, shapes))
    for n in names:
        arr = np.ascontiguousarray(params[n].data, dtype="<f8")
        out += struct.pack("<Q", arr.size)
        out += arr.tobytes()
    Path(path).write_bytes(bytes(out))


def save_oracle_checkpoint(path, config: TrainConfig | None = None) -> None:
    """A parameter-free checkpoint whose canonicalizer returns the known pose."""
    config = config or TrainConfig.desk()
    Path(path).write_bytes(_header("oracle", config.to_dict(), 0, []))


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if not raw.startswith(MAGIC.encode()) or cut < 0:
        raise ValueError(f"{path}: not a checkpoint")
    lines = raw[:cut].decode("ascii").split("\n")
    payload = memoryview(raw)[cut + len(marker):]
    meta, shapes = {}, []
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        if key == "tensor":
            name, dims = rest.split(" ")
            shapes.append((name, () if dims == "-" else tuple(int(d) for d in dims.split(","))))
        else:
            meta[key] = rest
    if int(meta.get("version", -1)) != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    config = json.loads(meta["config"])
    model_cfg = ModelConfig.from_dict(config["model"])
    if expected is not None and expected != model_cfg:
        raise ValueError(f"{path}: checkpoint model config does not match "
                         f"(channel preset {model_cfg.channel_preset} vs {expected.channel_preset})")
    kind = meta["kind"]
    if kind == "oracle":
        return Checkpoint(kind, config, int(meta["step"]), None)
    if len(shapes) != int(meta["tensors"]):
        raise ValueError(f"{path}: tensor count mismatch")
    tensors, pos = {}, 0
    for name, shape in shapes:
        if pos + 8 > len(payload):
            raise ValueError(f"{path}: truncated payload at {name}")
        (count,) = struct.unpack_from("<Q", payload, pos)
        pos += 8
        if count != int(np.prod(shape, dtype=np.int64)) or pos + 8 * count > len(payload):
            raise ValueError(f"{path}: corrupt payload for {name}")
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=pos).astype(np.float64)
        tensors[name] = ad.tensor(arr.reshape(shape), requires_grad=True)
        pos += 8 * count
    if pos != len(payload):
        raise ValueError(f"{path}: trailing bytes after payload")
    ref = init_params(model_cfg, np.random.default_rng(0))
    if [(n, t.shape) for n, t in ref.tensors.items()] != [(n, t.shape) for n, t in tensors.items()]:
        raise ValueError(f"{path}: parameter layout does not match the model config")
    return Checkpoint(kind, config, int(meta["step"]), ModelParams(model_cfg, tensors))
