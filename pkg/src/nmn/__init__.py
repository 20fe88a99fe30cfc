"""Neighborhood matching entity alignment between two knowledge graphs."""

__version__ = "0.1.0"

from .config import TrainConfig
from .errors import (ConfigError, DimensionError, EmptyNeighborhoodError, IntegrityError, NMNError,
                     ParseError, TrainingError)
from .evaluation import InferenceContext, bucketed_hits, hits_at_k, rank_all, rank_counterparts
from .kg import Dataset, KnowledgeGraph, MergedGraph, load_dataset, merge_graphs
from .model import ModelParams, load_checkpoint, save_checkpoint
from .training import TrainingData, run_training

__all__ = [
    "ConfigError", "Dataset", "DimensionError", "EmptyNeighborhoodError", "InferenceContext",
    "IntegrityError", "KnowledgeGraph", "MergedGraph", "ModelParams", "NMNError", "ParseError",
    "TrainConfig", "TrainingData", "TrainingError", "bucketed_hits", "hits_at_k", "load_checkpoint",
    "load_dataset", "merge_graphs", "rank_all", "rank_counterparts", "run_training", "save_checkpoint",
]
