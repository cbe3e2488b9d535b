"""Pyramid vision graph neural network with a capsule classification head, on numpy."""

from .backbone import Backbone, ModelConfig, count_params_flops
from .capsule import CapsuleHead, dynamic_routing, margin_loss, squash
from .checkpoint import Checkpoint, checkpoint_load, checkpoint_save
from .config import RunConfig, parse_config
from .data import (HAM_CLASSES, ArrayDataset, DatasetManifest, SplitSpec, load_manifest, preprocess,
                   stratified_split, synth_dataset)
from .estimator import PViGClassifier
from .exceptions import (PViGError, ShapeError, NumericError, ContractError, ConfigError,
                         DegenerateGraphError, DegenerateBatchError, DataError, UnknownLabelError,
                         MissingImageError, DecodeError, StratificationError, DivergenceError,
                         CheckpointError, CheckpointVersionError, CheckpointTruncatedError,
                         CheckpointChecksumError, CheckpointMismatchError)
from .gradcheck import grad_check
from .graph import knn_dilated, knn_indices
from .model import PViGNet, cross_entropy
from .tensor import Tape, Tensor, backward, precision, set_precision
from .training import MetricsReport, TrainConfig, evaluate, metrics_from_confusion, train

__version__ = "0.1.0"

__all__ = [
    "Backbone", "ModelConfig", "count_params_flops", "CapsuleHead", "dynamic_routing", "margin_loss",
    "squash", "Checkpoint", "checkpoint_load", "checkpoint_save", "RunConfig", "parse_config",
    "HAM_CLASSES", "ArrayDataset", "DatasetManifest", "SplitSpec", "load_manifest", "preprocess",
    "stratified_split", "synth_dataset", "PViGClassifier", "grad_check", "knn_dilated", "knn_indices",
    "PViGNet", "cross_entropy", "Tape", "Tensor", "backward", "precision", "set_precision",
    "MetricsReport", "TrainConfig", "evaluate", "metrics_from_confusion", "train",
    "PViGError", "ShapeError", "NumericError", "ContractError", "ConfigError", "DegenerateGraphError", "DegenerateBatchError", "DataError", "UnknownLabelError", "MissingImageError", "DecodeError", "StratificationError", "DivergenceError", "CheckpointError", "CheckpointVersionError", "CheckpointTruncatedError", "CheckpointChecksumError", "CheckpointMismatchError",
]
