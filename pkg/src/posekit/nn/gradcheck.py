"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np


def relative_error(analytic, numeric, floor: float = 1e-8) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[], float], array: np.ndarray, eps: float = 1e-5,
                 indices=None) -> np.ndarray:
    """Central differences of ``f()`` w.r.t. entries of ``array`` (perturbed in place)."""
    flat = array.reshape(-1)
    indices = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size)
    for i in indices:
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(array.shape)


def grad_check(net, x: np.ndarray, loss: Callable[[np.ndarray], tuple[float, np.ndarray]],
               eps: float = 1e-5, max_entries: int | None = 64, check_input: bool = True,
               seed: int = 0) -> float:
    """Max relative error between backprop and central differences.

    ``loss(y)`` returns ``(value, dvalue/dy)``. At most ``max_entries``
    randomly chosen entries of each parameter (and of the input) are probed.
    """
    rng = np.random.default_rng(seed)
    params = net.parameters()
    for p in params.values():
        p.zero_grad()
    y = net.forward(x)
    _, dy = loss(y)
    dx = net.backward(dy)

    def value():
        return loss(net.forward(x))[0]

    worst = 0.0
    targets = [(p.data, p.grad) for p in params.values()]
    if check_input:
        targets.append((x, dx))
    for data, analytic in targets:
        n = data.size
        idx = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        num = numeric_grad(value, data, eps, idx)
        err = relative_error(analytic.reshape(-1)[idx], num.reshape(-1)[idx])
        worst = max(worst, float(err.max(initial=0.0)))
    return worst


def check_function(f: Callable[..., tuple[float, tuple]], args: list[np.ndarray], eps: float = 1e-5,
                   max_entries: int | None = None, seed: int = 0) -> float:
    """Gradient check for ``f(*args) -> (value, grads)`` with one grad per arg."""
    rng = np.random.default_rng(seed)
    _, grads = f(*args)
    worst = 0.0
    for a, g in zip(args, grads):
        if g is None:
            continue
        n = a.size
        idx = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        num = numeric_grad(lambda: f(*args)[0], a, eps, idx)
        err = relative_error(np.asarray(g).reshape(-1)[idx], num.reshape(-1)[idx])
        worst = max(worst, float(err.max(initial=0.0)))
    return worst
