"""Small numpy neural-network substrate with layer-wise reverse-mode gradients."""
from .layers import (
    Conv,
    Dropout,
    FullyConnected,
    GlobalAveragePool,
    Layer,
    NumericFault,
    ReLU,
    Softmax,
    conv_output_size,
    layer_from_spec,
)
from .network import Sequential, class_weights, mean_squared_error, weighted_cross_entropy
from .serialize import ModelFileError, load_network, save_network
from .train import Adam, SGD, TrainConfig, TrainResult, group_max, iter_batches, predict_proba, train

__all__ = [
    "Adam", "Conv", "Dropout", "FullyConnected", "GlobalAveragePool", "Layer", "ModelFileError",
    "NumericFault", "ReLU", "SGD", "Sequential", "Softmax", "TrainConfig", "TrainResult",
    "class_weights", "conv_output_size", "group_max", "iter_batches", "layer_from_spec",
    "load_network", "mean_squared_error", "predict_proba", "save_network", "train",
    "weighted_cross_entropy",
]
