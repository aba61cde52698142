"""Point-cloud learning kit: a three-stage multi-abstraction refinement
network (hierarchical backbone, feature cross-referencing, feature
re-encoding) built on a minimal numpy reverse-mode autodiff core, with
geometric kernels, synthetic data, and a training/evaluation harness."""

from . import autodiff, checkpoint, data, harness, layers, metrics, model, pointops
from .autodiff import NonFiniteError, Tensor, grad_check, no_grad
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DataFormatError,
    DatasetManifest,
    PointCloud,
    read_xyzn,
    synth_shapes,
    write_xyzn,
)
from .harness import TrainConfig, ablate, bench, evaluate, gradient_suite, train
from .metrics import MetricsReport, miou
from .model import (
    Model,
    ModelConfig,
    classifier_config,
    complexity,
    lite_config,
    scaled_classifier_config,
    segmenter_config,
)

__all__ = [
    "autodiff",
    "checkpoint",
    "data",
    "harness",
    "layers",
    "metrics",
    "model",
    "pointops",
    "NonFiniteError",
    "Tensor",
    "grad_check",
    "no_grad",
    "Checkpoint",
    "CheckpointError",
    "load_checkpoint",
    "save_checkpoint",
    "DataFormatError",
    "DatasetManifest",
    "PointCloud",
    "read_xyzn",
    "synth_shapes",
    "write_xyzn",
    "TrainConfig",
    "ablate",
    "bench",
    "evaluate",
    "gradient_suite",
    "train",
    "MetricsReport",
    "miou",
    "Model",
    "ModelConfig",
    "classifier_config",
    "complexity",
    "lite_config",
    "scaled_classifier_config",
    "segmenter_config",
]
__version__ = "0.1.0"
