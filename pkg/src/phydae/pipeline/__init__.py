"""Two-stage assembly, training, evaluation, checkpoints and accounting."""
from .accounting import CostReport, cost_report, count_params
from .checkpoint import (CheckpointBundle, CheckpointError, build_model, load_checkpoint,
                         save_checkpoint)
from .config import ModelConfig, TrainConfig
from .data import PairedSet, load_split
from .evaluate import (EvalTable, RoutingReport, evaluate, evaluate_identity, inspect_routing,
                       oracle_restore)
from .model import ForwardResult, PhyDAE, Stage1, Stage2
from .train import TrainingDiverged, TrainResult, train

__all__ = [
    "CheckpointBundle", "CheckpointError", "CostReport", "EvalTable", "ForwardResult",
    "ModelConfig", "PairedSet", "PhyDAE", "RoutingReport", "Stage1", "Stage2", "TrainConfig",
    "TrainResult", "TrainingDiverged", "build_model", "cost_report", "count_params", "evaluate",
    "evaluate_identity", "inspect_routing", "load_checkpoint", "load_split", "oracle_restore",
    "save_checkpoint", "train",
]
