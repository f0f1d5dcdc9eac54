"""Microcalcification segmentation: a slim FCN trained with online hard
negative mining, tiled full-resolution inference, FROC/ROC/PR evaluation and
cluster shape statistics."""

from .errors import (CalcsegError, CheckpointError, ConfigError, DataError,
                     DegenerateBatchError, DimensionMismatchError, NumericalError,
                     UndefinedMetricError)
from .model import ArchConfig, Model, build_model, forward, parameter_count, receptive_field
from .training import TrainConfig, train
from .inference import ProbabilityMap, predict_full
from .morphology import ShapeStats, connected_components, shape_stats

__version__ = "0.1.0"

__all__ = [
    "ArchConfig", "CalcsegError", "CheckpointError", "ConfigError", "DataError",
    "DegenerateBatchError", "DimensionMismatchError", "Model", "NumericalError",
    "ProbabilityMap", "ShapeStats", "TrainConfig", "UndefinedMetricError", "build_model",
    "connected_components", "forward", "parameter_count", "predict_full", "receptive_field",
    "shape_stats", "train",
]
