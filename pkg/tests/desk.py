"""Desk-scale training runs shared by the acceptance tests.

Runs are deterministic, so a finished run is cached on disk under a key made
of its configuration and a hash of the package sources.  Set
``CANONPOSE_RETRAIN=1`` to ignore the cache.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

import canonpose
from canonpose.data import gen_synthetic
from canonpose.model import ModelConfig
from canonpose.training import (TrainConfig, load_checkpoint, save_checkpoint, train,
                                write_loss_csv)

N_TRAIN = 256
N_HELD_OUT = 32
CACHE = Path(os.environ.get("CANONPOSE_CACHE", Path.home() / ".cache" / "canonpose-desk"))


TRAINING_MODULES = ("autodiff", "so3", "pointops", "tfn", "model", "losses", "data",
                    "occlusion", "training")


def source_hash() -> str:
    """Hash of every module that influences a training run."""
    h = hashlib.sha256()
    root = Path(canonpose.__file__).parent
    for p in (root / f"{m}.py" for m in TRAINING_MODULES):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def dataset(family: str, data_seed: int = 0):
    """``(train clouds, held-out records)`` for one family."""
    man = gen_synthetic(family, N_TRAIN + N_HELD_OUT, np.random.default_rng(data_seed),
                        n_val=N_HELD_OUT)
    return man.clouds("train"), man.split("val")


def desk_config(seed: int = 0, n_frames: int = 5, iterations: int = 2000) -> TrainConfig:
    return TrainConfig.desk(seed=seed, iterations=iterations,
                            model=replace(ModelConfig(channel_preset=64), n_frames=n_frames))


def desk_run(family: str, config: TrainConfig, log=None):
    """Train (or load the cached result) and return ``(params, history, seconds)``."""
    key = hashlib.sha256(json.dumps({"family": family, "config": config.to_dict(),
                                     "n": N_TRAIN, "src": source_hash()},
                                    sort_keys=True).encode()).hexdigest()[:20]
    folder = CACHE / key
    ckpt, hist = folder / "checkpoint.ckpt", folder / "history.json"
    if ckpt.exists() and hist.exists() and not os.environ.get("CANONPOSE_RETRAIN"):
        meta = json.loads(hist.read_text())
        return load_checkpoint(ckpt).params, meta["history"], meta["seconds"]
    clouds, _ = dataset(family)
    t0 = time.perf_counter()
    result = train(clouds, config, log=log, log_every=100)
    seconds = time.perf_counter() - t0
    folder.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, result.params, config, config.iterations)
    write_loss_csv(folder / "loss.csv", result.history)
    hist.write_text(json.dumps({"history": result.history, "seconds": seconds}))
    return result.params, result.history, seconds


def evaluate(params, held_out, n_rotations: int = 16, seed: int = 0, with_crops: bool = True,
             raw: bool = True) -> dict:
    """IC (rotation and raw transform), selected-frame ortho residual and TE (model and zero predictor) on held-out shapes."""
    from canonpose import metrics as MT
    from canonpose.losses import projection_targets
    from canonpose.occlusion import random_direction, slice_crop
    from canonpose.so3 import random_rotation

    canon = MT.ModelCanonicalizer(params)
    clouds = [r.cloud for r in held_out]
    out = {"ic": MT.ic_metric(canon, clouds, n_rotations, seed=seed).value}
    if raw:
        plain = MT.ModelCanonicalizer(params, rotation=False)
        out["ic_raw"] = MT.ic_metric(plain, clouds, n_rotations, seed=seed).value
    if not with_crops:
        return out
    rng = np.random.default_rng([seed, 1])
    posed = [c.rotated(random_rotation(rng)) for c in clouds]
    poses = [r.pose for r in canon.results(posed)]
    out["ortho"] = float(np.mean([np.linalg.norm(e - projection_targets(e)) for e in poses]))
    crops = [slice_crop(c, direction=random_direction(rng)) for c in posed]
    for c in crops:
        c.partial.points = c.partial.points - c.partial.points.mean(axis=0)
    out["te"] = MT.te_metric(canon, crops).value
    out["te_zero"] = MT.te_metric(MT.zero_translation, crops).value
    return out
