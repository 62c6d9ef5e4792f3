"""Toy selective-SSM inference engine with post-training token reduction."""

from .exceptions import (
    CheckpointFormatError,
    InfeasibleTargetError,
    InvalidInputError,
    InvalidParameterError,
    InvalidPlanError,
    UnsupportedModeError,
)
from .metrics import MetricKind, TokenImportance, importance, rank_tokens
from .model import ForwardTrace, SelectiveSSM, model_forward
from .reduction import (
    BipartiteMergeReducer,
    EViTReducer,
    UTRCReducer,
    make_reducer,
)
from .schedule import ReductionSchedule, estimate_layer_flops, solve_keep_ratio
from .ssm_core import LayerWeights, ModelConfig, TokenSequence, init_weights

__version__ = "0.1.0"

__all__ = [
    "BipartiteMergeReducer", "CheckpointFormatError", "EViTReducer", "ForwardTrace",
    "InfeasibleTargetError", "InvalidInputError", "InvalidParameterError", "InvalidPlanError",
    "LayerWeights", "MetricKind", "ModelConfig", "ReductionSchedule", "SelectiveSSM",
    "TokenImportance", "TokenSequence", "UTRCReducer", "UnsupportedModeError",
    "estimate_layer_flops", "importance", "init_weights", "make_reducer", "model_forward",
    "rank_tokens", "solve_keep_ratio",
]
