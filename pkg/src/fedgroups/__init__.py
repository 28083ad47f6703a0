"""Federated learning over arbitrary topologies decomposed into star-shaped groups."""

from .data import Dataset, PartitionSpec, TrainerConfig, evaluate, local_train, make_blobs, partition
from .estimator import FederatedClassifier
from .fedopt import AggregationRule, ControlState, PipelineConfig, aggregate
from .params import ParamVector, ShapeMismatch, WeightedModel, axpy, l2_distance, scale, zeros_like
from .runtime import (
    Federation,
    InsufficientParticipants,
    RoundPlan,
    RoundReport,
    RuntimeAbort,
    run_decentralized_round,
    run_group_round,
    run_hierarchy,
    sample_participants,
)
from .topology import FederatedGroup, NodeId, TopologyGraph, decompose, validate

__version__ = "0.1.0"

__all__ = [
    "AggregationRule",
    "ControlState",
    "Dataset",
    "FederatedClassifier",
    "FederatedGroup",
    "Federation",
    "InsufficientParticipants",
    "NodeId",
    "ParamVector",
    "PartitionSpec",
    "PipelineConfig",
    "RoundPlan",
    "RoundReport",
    "RuntimeAbort",
    "ShapeMismatch",
    "TopologyGraph",
    "TrainerConfig",
    "WeightedModel",
    "aggregate",
    "axpy",
    "decompose",
    "evaluate",
    "l2_distance",
    "local_train",
    "make_blobs",
    "partition",
    "run_decentralized_round",
    "run_group_round",
    "run_hierarchy",
    "sample_participants",
    "scale",
    "validate",
    "zeros_like",
]
