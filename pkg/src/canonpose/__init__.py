"""Rotation-equivariant, self-supervised canonicalization of 3D point clouds."""
from .data import PointCloud, gen_synthetic
from .losses import LossWeights
from .metrics import (MetricReport, ModelCanonicalizer, cc_metric, chamfer, gc_metric, ic_metric,
                      te_metric)
from .model import ModelConfig, canonicalize, forward, init_params
from .training import TrainConfig, load_checkpoint, save_checkpoint, train

__all__ = ["PointCloud", "gen_synthetic", "LossWeights", "MetricReport", "ModelCanonicalizer", "chamfer",
           "ic_metric", "cc_metric", "gc_metric", "te_metric",
           "ModelConfig", "canonicalize", "forward", "init_params", "TrainConfig",
           "load_checkpoint", "save_checkpoint", "train"]
__version__ = "0.1.0"
