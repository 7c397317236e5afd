"""Reference-based x4 super-resolution with gated dual-stream window attention."""

from .attention import GateState, HeadConfig, attention_scores, gated_head, mlp_block, multi_head_attention
from .model import ModelConfig, RefSRModel, apply_ablation, count_parameters, extract_lr_features
from .training import OptimizerState, TrainConfig, adam_step, l1_loss, one_cycle_lr, train_loop

__all__ = [
    "GateState",
    "HeadConfig",
    "ModelConfig",
    "OptimizerState",
    "RefSRModel",
    "TrainConfig",
    "adam_step",
    "apply_ablation",
    "attention_scores",
    "count_parameters",
    "extract_lr_features",
    "gated_head",
    "l1_loss",
    "mlp_block",
    "multi_head_attention",
    "one_cycle_lr",
    "train_loop",
]

__version__ = "0.1.0"
