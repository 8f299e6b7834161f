"""Hybrid channel + weight pruning on a small numpy deep-learning core."""

from .data import Dataset, load_cifar10_binary, load_idx, split, synth_dataset
from .model_graph import (
    CostReport, LayerNode, ModelGraph, build_mini_resnet, build_resnet50,
    build_resnet56_cifar, count_costs, forward,
)
from .model_io import load_model, save_model
from .pipeline import HybridConfig, run_hybrid
from .sensitivity import (
    ChannelPlan, SensitivityConfig, SensitivityProfile, channel_importance,
    masked_accuracy, plan_channels, run_sensitivity,
)
from .surgery import SurgeryRecord, slice_model, validate_surgery
from .trainer import PruneConfig, TrainConfig, compute_threshold, evaluate, fine_tune, train_step, update_mask

__version__ = "0.1.0"
