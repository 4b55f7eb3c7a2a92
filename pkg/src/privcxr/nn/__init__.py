"""Minimal numpy network engine: layers, ResNet9 builder, loss, NAdam, checkpoints."""
from privcxr.nn.layers import NumericalError
from privcxr.nn.model import ModelConfig, ResNet9, build_model, count_parameters, sigmoid

__all__ = ["ModelConfig", "NumericalError", "ResNet9", "build_model", "count_parameters", "sigmoid"]
