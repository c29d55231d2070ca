"""Stateless differentiable operations used between network blocks.

Each forward returns ``(output, cache)``; the matching backward takes the
cache and the upstream gradient.
"""
from __future__ import annotations

import numpy as np


def bilinear_warp(F: np.ndarray, flow: np.ndarray):
    """Resample ``F`` (N, C, H, W) at ``pixel + flow`` with a bilinear kernel.

    ``flow[:, 0]`` is the column (x) offset and ``flow[:, 1]`` the row (y)
    offset, in pixels. Kernel taps falling outside the grid contribute zero.
    """
    N, C, H, W = F.shape
    rows, cols = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    X = cols[None] + flow[:, 0]
    Y = rows[None] + flow[:, 1]
    x0 = np.floor(X).astype(np.int64)
    y0 = np.floor(Y).astype(np.int64)
    wx = X - x0
    wy = Y - y0
    corners = []
    out = np.zeros_like(F)
    batch = np.arange(N)[:, None, None]
    for dy_, dx_, w in ((0, 0, (1 - wy) * (1 - wx)), (0, 1, (1 - wy) * wx),
                        (1, 0, wy * (1 - wx)), (1, 1, wy * wx)):
        xi, yi = x0 + dx_, y0 + dy_
        valid = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        xc, yc = np.clip(xi, 0, W - 1), np.clip(yi, 0, H - 1)
        vals = F[batch, :, yc, xc]                      # N, H, W, C
        vals = np.where(valid[..., None], vals, 0.0).transpose(0, 3, 1, 2)
        out += w[:, None] * vals
        corners.append((xc, yc, valid, vals))
    cache = (F.shape, wx, wy, corners)
    return out, cache


def bilinear_warp_backward(cache, dout: np.ndarray):
    """Gradients of :func:`bilinear_warp` w.r.t. the feature map and the flow."""
    (N, C, H, W), wx, wy, corners = cache
    dF = np.zeros(N * C * H * W, dtype=dout.dtype)
    n_idx = np.arange(N)[:, None, None, None]
    c_idx = np.arange(C)[None, :, None, None]
    weights = ((1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx)
    for (xc, yc, valid, _), w in zip(corners, weights):
        contrib = dout * (w * valid)[:, None]
        flat = ((n_idx * C + c_idx) * H + yc[:, None]) * W + xc[:, None]
        dF += np.bincount(flat.ravel(), weights=contrib.ravel(), minlength=dF.size)
    v00, v01, v10, v11 = (c[3] for c in corners)
    dX = (1 - wy)[:, None] * (v01 - v00) + wy[:, None] * (v11 - v10)
    dY = (1 - wx)[:, None] * (v10 - v00) + wx[:, None] * (v11 - v01)
    dflow = np.stack([(dout * dX).sum(axis=1), (dout * dY).sum(axis=1)], axis=1)
    return dF.reshape(N, C, H, W), dflow


def spatial_softmax(s: np.ndarray):
    """Softmax over the spatial axes of (N, K, H, W)."""
    N, K, H, W = s.shape
    flat = s.reshape(N, K, H * W)
    flat = flat - flat.max(axis=2, keepdims=True)
    e = np.exp(flat)
    a = (e / e.sum(axis=2, keepdims=True)).reshape(N, K, H, W)
    return a, a


def spatial_softmax_backward(a: np.ndarray, da: np.ndarray) -> np.ndarray:
    inner = (a * da).sum(axis=(2, 3), keepdims=True)
    return a * (da - inner)


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic bilinear resampling matrix, align-corners=False convention."""
    M = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), n_in - 1)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        f = src - i0
        M[o, i0] += 1 - f
        M[o, i1] += f
    return M


def upsample_bilinear(x: np.ndarray, out_hw: tuple[int, int]):
    """Separable bilinear resize of (N, C, H, W) to ``out_hw``."""
    _, _, H, W = x.shape
    Uy = _interp_matrix(H, out_hw[0])
    Ux = _interp_matrix(W, out_hw[1])
    y = np.einsum("oh,nchw,pw->ncop", Uy, x, Ux, optimize=True)
    return y, (Uy, Ux)


def upsample_bilinear_backward(cache, dy: np.ndarray) -> np.ndarray:
    Uy, Ux = cache
    return np.einsum("oh,ncop,pw->nchw", Uy, dy, Ux, optimize=True)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))
