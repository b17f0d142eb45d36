"""Dynamic-graph transformer: snapshot graphs, attention encoder, training and evaluation."""

from .graph import SnapshotSequence, TemporalUnionGraph, build_union, synth_dynamic_sbm
from .model import ModelConfig, init_params
from .trainer import Checkpoint, TrainConfig, finetune, pretrain
from .evaluation import EvalReport, evaluate, evaluate_new_links

__all__ = ["SnapshotSequence", "TemporalUnionGraph", "build_union", "synth_dynamic_sbm",
           "ModelConfig", "init_params", "TrainConfig", "Checkpoint", "pretrain", "finetune",
           "EvalReport", "evaluate", "evaluate_new_links"]
__version__ = "0.1.0"
