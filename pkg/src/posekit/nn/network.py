from __future__ import annotations

from typing import Iterable

import numpy as np

from ..exceptions import ConfigurationError, StateError
from .layers import Layer, Parameter


class Network:
    """Ordered stack of layers validated against an input shape.

    ``taps`` maps a name to a layer index; the output of that layer is kept
    in ``self.tap_outputs`` after a forward pass, and ``backward`` accepts
    extra gradients for those outputs, so side branches (e.g. skip or
    pass-through connections) can be wired outside the stack.
    """

    def __init__(self, layers: Iterable[Layer], input_shape: tuple, name: str = "net",
                 taps: dict[str, int] | None = None):
        self.layers = list(layers)
        self.name = name
        self.input_shape = tuple(input_shape)
        self.taps = dict(taps or {})
        shape = self.input_shape
        self.shapes = [shape]
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except ConfigurationError as exc:
                raise ConfigurationError(f"{name}: layer {i} ({layer!r}): {exc}") from None
            self.shapes.append(shape)
        self.output_shape = shape
        for tap, idx in self.taps.items():
            if not 0 <= idx < len(self.layers):
                raise ConfigurationError(f"{name}: tap {tap!r} points at missing layer {idx}")
        self.tap_outputs: dict[str, np.ndarray] = {}
        self._ran_forward = False

    def forward(self, x: np.ndarray) -> np.ndarray:
        if tuple(x.shape[1:]) != self.input_shape:
            raise ConfigurationError(f"{self.name}: expected input (N, {self.input_shape}), got {x.shape}")
        self.tap_outputs = {}
        by_index = {v: k for k, v in self.taps.items()}
        for i, layer in enumerate(self.layers):
            x = layer.forward(x)
            if i in by_index:
                self.tap_outputs[by_index[i]] = x
        self._ran_forward = True
        return x

    __call__ = forward

    def backward(self, dy: np.ndarray, tap_grads: dict[str, np.ndarray] | None = None) -> np.ndarray:
        """Accumulate parameter gradients; returns the gradient w.r.t. the input."""
        if not self._ran_forward:
            raise StateError(f"{self.name}: backward called before forward")
        inject = {self.taps[k]: v for k, v in (tap_grads or {}).items()}
        for i in range(len(self.layers) - 1, -1, -1):
            if i in inject:
                dy = dy + inject[i]
            dy = self.layers[i].backward(dy)
        self._ran_forward = False
        return dy

    def parameters(self) -> dict[str, Parameter]:
        out = {}
        for i, layer in enumerate(self.layers):
            for pname, p in layer.params.items():
                out[f"{self.name}.{i}.{layer.kind}.{pname}"] = p
        return out

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def __repr__(self):
        body = ", ".join(repr(layer) for layer in self.layers)
        return f"Network({self.name}: {self.input_shape} -> {self.output_shape}; {body})"


def collect_parameters(*nets) -> dict[str, Parameter]:
    params = {}
    for net in nets:
        params.update(net.parameters())
    return params


def zero_parameters(net_or_params) -> None:
    params = net_or_params.parameters() if hasattr(net_or_params, "parameters") else net_or_params
    for p in params.values():
        p.data[...] = 0.0


def count_parameters(params: dict[str, Parameter]) -> int:
    return int(sum(np.prod(p.shape) for p in params.values()))
