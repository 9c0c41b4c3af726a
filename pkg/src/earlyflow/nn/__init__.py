from .model import (
    PARAM_NAMES,
    ForwardTrace,
    Model,
    backward,
    forward,
    head_probabilities,
    init_model,
    load_model,
    loss,
    packet_features,
    parameter_count,
    parameter_count_for,
    pooled_prefix_features,
    prefix_probabilities,
    save_model,
)
from .optim import AdamConfig, AdamState, adam_step
from .train import TrainConfig, TrainResult, length_buckets, train, train_arrays

__all__ = [
    "PARAM_NAMES", "ForwardTrace", "Model", "backward", "forward", "head_probabilities",
    "init_model", "load_model", "loss", "packet_features", "parameter_count",
    "parameter_count_for", "pooled_prefix_features", "prefix_probabilities", "save_model",
    "AdamConfig", "AdamState", "adam_step", "TrainConfig", "TrainResult", "length_buckets", "train",
    "train_arrays",
]
