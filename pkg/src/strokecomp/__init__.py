"""Skeleton-based classification of compensatory movements in upper-limb rehabilitation.

Modules: ``skeleton`` (types, graph, JSONL I/O), ``preprocess`` (keyframes,
de-duplication, spline alignment, Z-scores), ``autodiff`` (reverse-mode
tensors), ``model`` (GCN / LSTM / attention classifier), ``baselines`` (KNN,
linear SVM, random forest), ``metrics``, ``synthgen`` (synthetic motion) and
``harness`` (experiments; CLI in ``cli``).
"""
from .skeleton import (ActionKind, Dataset, Label, MotionSequence, SkeletonGraph, canonical_upper_limb_graph,
                       load_dataset, save_dataset, stratified_split)
from .preprocess import ChannelStats, PreprocessConfig, preprocess_dataset, preprocess_sequences
from .model import GcnLstmAttModel, ModelConfig, TrainConfig, Variant, load_model, predict, save_model, train
from .metrics import compute_metrics, confusion, render_report
from .synthgen import GenConfig, generate

__version__ = "0.1.0"
