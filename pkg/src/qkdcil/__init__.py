"""Quantum-gated continual learner: desk-scale, exemplar-free, task-agnostic.

A frozen random backbone grows one low-rank adapter and one head per
task.  A small variational quantum circuit (simulated exactly) scores
how relevant each past task is to the current input; those relevance
weights steer both knowledge distillation during training and adapter
fusion at inference.
"""

from .checkpoint import inspect_checkpoint, load_checkpoint, save_checkpoint
from .datagen import StreamSpec, gen_stream, load_feature_file, write_feature_file
from .trainer import (
    IncrementalModel,
    Metrics,
    TrainConfig,
    evaluate,
    infer,
    infer_batch,
    new_model,
    run_protocol,
    run_protocol_full,
    train_task,
)

__version__ = "0.1.0"

__all__ = [
    "IncrementalModel",
    "Metrics",
    "StreamSpec",
    "TrainConfig",
    "__version__",
    "evaluate",
    "gen_stream",
    "infer",
    "infer_batch",
    "inspect_checkpoint",
    "load_checkpoint",
    "load_feature_file",
    "new_model",
    "run_protocol",
    "run_protocol_full",
    "save_checkpoint",
    "train_task",
    "write_feature_file",
]
