"""Compositional zero-shot recognition with multi-level feature mixing,
focus-consistency training, and calibrated seen/unseen evaluation."""

__version__ = "0.1.0"

from .data import (
    DatasetManifest,
    EmbeddingTable,
    LabelSpace,
    generate_synthetic,
    init_semantic_embeddings,
    load_manifest,
)
from .evaluation import EvalCurve, EvalReport, ScoreTable, summarize, sweep
from .model import ModelConfig, ThreeBranchNet, fuse_scores
from .training import TrainConfig, load_checkpoint, restore_model, train

__all__ = [
    "DatasetManifest",
    "EmbeddingTable",
    "EvalCurve",
    "EvalReport",
    "LabelSpace",
    "ModelConfig",
    "ScoreTable",
    "ThreeBranchNet",
    "TrainConfig",
    "fuse_scores",
    "generate_synthetic",
    "init_semantic_embeddings",
    "load_checkpoint",
    "load_manifest",
    "restore_model",
    "summarize",
    "sweep",
    "train",
]
