"""Command-line entry point.

Exit status is 0 on success, 1 when arguments, files or configs fail
validation, and 2 when a run fails after validation.
"""
from __future__ import annotations

import argparse
import json
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics as MT
from .data import FAMILIES, PointCloud, gen_synthetic, load_manifest, read_xyz, save_manifest, write_xyz
from .model import forward, orthonormalize
from .occlusion import depth_camera_crop, random_direction, slice_crop
from .so3 import random_rotation
from .training import (TrainConfig, load_checkpoint, save_checkpoint, train, write_loss_csv)

SUBCOMMANDS = ("gen-data", "train", "canonicalize", "evaluate", "segment",
               "transfer-keypoints", "selftest")
METRICS = ("ic", "cc", "gc", "te", "registration")


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="canonpose", description="Self-supervised point cloud canonicalization.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", type=Path, help="JSON file with TrainConfig keys")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", type=Path, default=Path("."))
        return sp

    sp = add("gen-data", "write a synthetic manifest and its .xyz files")
    sp.add_argument("--family", default="toy-plane", choices=FAMILIES)
    sp.add_argument("--n", type=int, default=256)
    sp.add_argument("--val", type=int, default=0, help="records tagged as held out")

    sp = add("train", "train on a manifest; writes checkpoint, loss CSV and loss PNG")
    sp.add_argument("manifest", type=Path)
    sp.add_argument("--crop", choices=("slice", "depth"), default=None)

    sp = add("canonicalize", "canonicalize one .xyz file; writes canonical.xyz and pose.txt")
    sp.add_argument("input", type=Path)
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--partial", action="store_true", help="input is a partial view")

    sp = add("evaluate", "compute metrics; writes metrics.csv and metrics.png")
    sp.add_argument("manifest", type=Path)
    sp.add_argument("--checkpoint", type=Path)
    sp.add_argument("--metric", choices=(*METRICS, "all"), default="all")
    sp.add_argument("--rotations", type=int, default=16)
    sp.add_argument("--compare", type=int, default=120)
    sp.add_argument("--baseline", choices=("pca",), default=None)
    sp.add_argument("--n", type=int, default=32, help="number of shapes evaluated")
    sp.add_argument("--crop", choices=("slice", "depth"), default="slice")

    sp = add("segment", "write a labeled .xyz with the predicted part of every point")
    sp.add_argument("input", type=Path)
    sp.add_argument("--checkpoint", type=Path, required=True)

    sp = add("transfer-keypoints", "move labels from a source shape onto a target shape")
    sp.add_argument("source", type=Path, help="labeled .xyz, label -1 marks unlabeled points")
    sp.add_argument("target", type=Path)
    sp.add_argument("--checkpoint", type=Path, required=True)

    sp = add("selftest", "run the equivariance, gradient and metric oracle suites")
    sp.add_argument("--quick", action="store_true", help="fewer seeds and rotations")
    return p


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _require_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ValidationError(f"{what} not found: {path}")
    return path


def _resolve_config(args) -> TrainConfig:
    base = {}
    if args.config is not None:
        try:
            base = json.loads(_require_file(args.config, "config").read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{args.config}: invalid JSON ({exc})") from None
    try:
        cfg = TrainConfig.desk() if not base else TrainConfig.from_dict(
            {**TrainConfig.desk().to_dict(), **base})
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if getattr(args, "crop", None) and args.command == "train":
            cfg = replace(cfg, crop=args.crop)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid config: {exc}") from None
    return cfg


def _print_config(args, cfg: TrainConfig | None) -> None:
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())}
    if cfg is not None:
        resolved["train_config"] = cfg.to_dict()
    print(json.dumps(resolved, sort_keys=True, indent=2))


def _load_checkpoint(path: Path):
    _require_file(path, "checkpoint")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError) as exc:
        raise ValidationError(str(exc)) from None


def _read_cloud(path: Path) -> PointCloud:
    _require_file(path, "point file")
    try:
        return read_xyz(path)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def _load_manifest(path: Path):
    if not (path.is_dir() or path.is_file()):
        raise ValidationError(f"manifest not found: {path}")
    try:
        return load_manifest(path)
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: {exc}") from None


class _Predictor:
    """Canonical pose, translation and segmentation from a model or oracle checkpoint."""

    def __init__(self, ckpt):
        self.params = ckpt.params

    def run(self, points: np.ndarray):
        centered = points - points.mean(axis=0)
        if self.params is None:
            return np.eye(3), np.zeros(3), np.ones((len(points), 1))
        res = forward(centered, self.params).result(0)
        return orthonormalize(res.pose).T, res.amodal_translation, res.segmentation


def _write_pose(path: Path, frame: np.ndarray, translation: np.ndarray) -> None:
    values = [*np.asarray(frame).reshape(-1), *np.asarray(translation)]
    path.write_text("".join(f"{float(v):.17g}\n" for v in values))


def read_pose(path) -> tuple[np.ndarray, np.ndarray]:
    vals = [float(v) for v in Path(path).read_text().split()]
    if len(vals) != 12:
        raise ValueError(f"{path}: expected 12 values, got {len(vals)}")
    return np.array(vals[:9]).reshape(3, 3), np.array(vals[9:])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> None:
    if args.n <= 0:
        raise ValidationError("--n must be positive")
    if not 0 <= args.val <= args.n:
        raise ValidationError("--val must lie in [0, n]")
    seed = 0 if args.seed is None else args.seed
    man = gen_synthetic(args.family, args.n, np.random.default_rng(seed), n_val=args.val)
    man.seed = seed
    path = save_manifest(man, args.out)
    print(f"wrote {len(man.records)} shapes to {path}")


def cmd_train(args, cfg: TrainConfig) -> None:
    man = _load_manifest(args.manifest)
    clouds = man.clouds("train") or man.clouds()
    args.out.mkdir(parents=True, exist_ok=True)
    result = train(clouds, cfg, log=print)
    save_checkpoint(args.out / "checkpoint.ckpt", result.params, cfg, cfg.iterations)
    write_loss_csv(args.out / "loss.csv", result.history)
    from .plotting import plot_loss_curves
    plot_loss_curves(result.history, args.out / "loss.png")
    print(f"wrote {args.out / 'checkpoint.ckpt'}, loss.csv, loss.png")


def cmd_canonicalize(args) -> None:
    pred = _Predictor(_load_checkpoint(args.checkpoint))
    cloud = _read_cloud(args.input)
    frame, t, _ = pred.run(cloud.points)
    centered = cloud.points - cloud.points.mean(axis=0)
    if not args.partial:
        t = np.zeros(3)
    canonical = (centered + t) @ frame.T
    args.out.mkdir(parents=True, exist_ok=True)
    write_xyz(args.out / "canonical.xyz", PointCloud(canonical, cloud.labels))
    _write_pose(args.out / "pose.txt", frame, t)
    print(f"wrote {args.out / 'canonical.xyz'} and pose.txt")


def _crop(cloud: PointCloud, rng, kind: str):
    if kind == "slice":
        return slice_crop(cloud, direction=random_direction(rng))
    radius = np.sqrt((cloud.points ** 2).sum(-1)).max()
    return depth_camera_crop(cloud, random_direction(rng) * 2.5 * radius)


def cmd_evaluate(args) -> None:
    if args.rotations <= 0 or args.compare <= 0 or args.n <= 0:
        raise ValidationError("--rotations, --compare and --n must be positive")
    if args.checkpoint is None and args.baseline is None:
        raise ValidationError("evaluate needs --checkpoint, --baseline or both")
    man = _load_manifest(args.manifest)
    records = man.split("val") or man.records
    clouds = [r.cloud for r in records[: args.n]]
    seed = 0 if args.seed is None else args.seed
    wanted = METRICS if args.metric == "all" else (args.metric,)

    methods = []
    if args.checkpoint is not None:
        ckpt = _load_checkpoint(args.checkpoint)
        if ckpt.params is None:
            methods.append(("oracle", MT.oracle_canonicalizer, MT.oracle_frame, MT.zero_translation))
        else:
            m = MT.ModelCanonicalizer(ckpt.params)
            methods.append(("model", m, m, m))
    if args.baseline == "pca":
        methods.append(("pca", MT.pca_canonicalizer, MT.pca_frame, MT.zero_translation))

    reports = []
    for name, canon, frame_fn, trans_fn in methods:
        cat = f"{records[0].family}/{name}" if records else name
        if "ic" in wanted:
            reports.append(MT.ic_metric(canon, clouds, args.rotations, seed=seed, category=cat))
        if "cc" in wanted:
            reports.append(MT.cc_metric(canon, clouds, args.compare, seed=seed, category=cat))
        if "gc" in wanted:
            reports.append(MT.gc_metric(frame_fn, clouds, seed=seed, category=cat))
        if "te" in wanted:
            rng = np.random.default_rng([seed, 1])
            crops = [_crop(c.rotated(random_rotation(rng)), rng, args.crop) for c in clouds]
            for c in crops:
                c.partial.points = c.partial.points - c.partial.points.mean(axis=0)
            reports.append(MT.te_metric(trans_fn, crops, category=cat, seed=seed))
        if "registration" in wanted:
            rng = np.random.default_rng([seed, 2])
            pairs = [(c.rotated(random_rotation(rng)), c.rotated(random_rotation(rng))) for c in clouds]
            err, cd = MT.registration_eval(frame_fn, pairs)
            reports.append(MT.MetricReport("RMSE", cat, err, len(pairs), seed))
            reports.append(MT.MetricReport("CD", cat, cd, len(pairs), seed))
    args.out.mkdir(parents=True, exist_ok=True)
    MT.write_reports(args.out / "metrics.csv", reports)
    from .plotting import plot_metrics
    plot_metrics(reports, args.out / "metrics.png")
    for r in reports:
        print(f"{r.metric:5s} {r.category:24s} {r.value:.6g}")


def cmd_segment(args) -> None:
    pred = _Predictor(_load_checkpoint(args.checkpoint))
    cloud = _read_cloud(args.input)
    _, _, seg = pred.run(cloud.points)
    args.out.mkdir(parents=True, exist_ok=True)
    write_xyz(args.out / "segmented.xyz", PointCloud(cloud.points, seg.argmax(axis=1)))
    print(f"wrote {args.out / 'segmented.xyz'}")


def cmd_transfer(args) -> None:
    pred = _Predictor(_load_checkpoint(args.checkpoint))
    src, tgt = _read_cloud(args.source), _read_cloud(args.target)
    if src.labels is None:
        raise ValidationError(f"{args.source}: source needs a label column")
    canon = []
    for c in (src, tgt):
        frame, _, seg = pred.run(c.points)
        canon.append(((c.points - c.points.mean(axis=0)) @ frame.T, seg))
    res = MT.keypoint_transfer(canon[0][0], src.labels, canon[1][0], canon[0][1], canon[1][1])
    args.out.mkdir(parents=True, exist_ok=True)
    write_xyz(args.out / "transferred.xyz", PointCloud(tgt.points, res.labels))
    if res.fallback.any():
        print(f"warning: {int(res.fallback.sum())} points used the empty-part fallback")
    print(f"wrote {args.out / 'transferred.xyz'}")


def cmd_selftest(args) -> bool:
    from .selftest import run_all
    seed = 0 if args.seed is None else args.seed
    return run_all(quick=args.quick, seed=seed)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
        cfg = _resolve_config(args) if args.command == "train" else None
        if args.command != "train" and args.config is not None:
            _resolve_config(args)
        _print_config(args, cfg)
        if args.command == "gen-data":
            cmd_gen_data(args)
        elif args.command == "train":
            cmd_train(args, cfg)
        elif args.command == "canonicalize":
            cmd_canonicalize(args)
        elif args.command == "evaluate":
            cmd_evaluate(args)
        elif args.command == "segment":
            cmd_segment(args)
        elif args.command == "transfer-keypoints":
            cmd_transfer(args)
        elif args.command == "selftest":
            return 0 if cmd_selftest(args) else 1
    except ValidationError as exc:
        print(f"canonpose: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001  runtime failure after validation
        traceback.print_exc(file=sys.stderr)
        print(f"canonpose: runtime failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
