"""Minimal numpy tensor engine: layers, networks, differentiable ops."""
from .checkpoint import assign_parameters, load_checkpoint, save_checkpoint
from .functional import (
    bilinear_warp,
    bilinear_warp_backward,
    spatial_softmax,
    spatial_softmax_backward,
    upsample_bilinear,
    upsample_bilinear_backward,
)
from .gradcheck import check_function, grad_check, numeric_grad, relative_error
from .layers import LAYER_KINDS, Conv2d, Layer, Linear, MaxPool2d, Parameter, ReLU, Sigmoid, Upsample2x
from .network import Network, collect_parameters, count_parameters, zero_parameters
from .optim import Adam, cosine_lr


def apply_layer(layer: Layer, x):
    """Run a single layer forward (caching activations for a later backward)."""
    return layer.forward(x)


__all__ = [
    "Adam", "Conv2d", "LAYER_KINDS", "Layer", "Linear", "MaxPool2d", "Network", "Parameter", "ReLU",
    "Sigmoid", "Upsample2x", "apply_layer", "assign_parameters", "bilinear_warp", "bilinear_warp_backward",
    "check_function", "collect_parameters", "cosine_lr", "count_parameters", "grad_check",
    "load_checkpoint", "numeric_grad", "relative_error", "save_checkpoint", "spatial_softmax",
    "spatial_softmax_backward", "upsample_bilinear", "upsample_bilinear_backward", "zero_parameters",
]
