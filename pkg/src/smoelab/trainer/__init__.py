"""Desk-scale model, data, optimizer, checkpoints and the training loop."""
from .checkpoint import CheckpointError, IncompatibleCheckpoint, checkpoint_load, checkpoint_save
from .config import ConfigError, ModelConfig, load_config, parse_config
from .data import DataStream, segment_purity, synth_data_gen
from .model import Model, NonFiniteLoss, backward_pass, forward_pass
from .optim import OptimizerState, adamw_step, lr_at
from .train import RunResult, evaluate, train_loop

__all__ = [
    "CheckpointError", "ConfigError", "DataStream", "IncompatibleCheckpoint", "Model", "ModelConfig",
    "NonFiniteLoss", "OptimizerState", "RunResult", "adamw_step", "backward_pass", "checkpoint_load",
    "checkpoint_save", "evaluate", "forward_pass", "load_config", "lr_at", "parse_config", "segment_purity",
    "synth_data_gen", "train_loop",
]
