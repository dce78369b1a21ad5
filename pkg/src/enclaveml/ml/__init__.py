"""Deterministic MLP payload: inference, SGD over a parameter server, federated averaging."""

from .data import DatasetShard, blobs, separable
from .io import load_model, load_model_shielded, load_shard, save_model_shielded
from .model import (
    GradientUpdate,
    ModelArtifact,
    TrainConfig,
    apply_gradients,
    average_gradients,
    federated_average,
    infer,
    infer_batch,
    loss_and_grads,
    sgd_step,
    softmax,
    train_step,
)
from .ps import ParameterServer, TrainStats, parameter_server_serve, single_process_sgd, worker_train_loop

__all__ = [
    "DatasetShard", "GradientUpdate", "ModelArtifact", "ParameterServer", "TrainConfig", "TrainStats",
    "apply_gradients", "average_gradients", "blobs", "federated_average", "infer", "infer_batch",
    "load_model", "load_model_shielded", "load_shard", "loss_and_grads", "parameter_server_serve",
    "save_model_shielded", "separable", "sgd_step", "single_process_sgd", "softmax", "train_step",
    "worker_train_loop",
]
