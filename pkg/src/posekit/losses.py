"""Training objectives: point-distance pose loss, weighted confidence loss,
attention orthogonality and their weighted sum.

Every loss returns its value together with the analytic gradient w.r.t.
its prediction inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import ConfigurationError, DataError, DivergenceError
from .geometry import Pose, raw_quat_grad, transform_points
from .objects import ObjectModel

KDTREE_MIN_POINTS = 512


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1
    beta: float = 0.05
    gamma: float = 0.1
    kappa: float = 0.01
    lambda_obj: float = 5.0
    lambda_noobj: float = 0.5

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.kappa, self.lambda_obj, self.lambda_noobj) < 0:
            raise ConfigurationError("loss weights must be non-negative")


def nearest_indices(queries: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Index of the closest candidate for each query (exact)."""
    if len(candidates) >= KDTREE_MIN_POINTS:
        return cKDTree(candidates).query(queries)[1]
    d2 = ((queries[:, None, :] - candidates[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def pose_distance_loss(target_pts: np.ndarray, R: np.ndarray, t: np.ndarray, points: np.ndarray,
                       symmetric: bool = False):
    """Mean distance between ``target_pts`` and ``R @ points + t``.

    With ``symmetric`` each target point is matched to its closest
    predicted point. Returns ``(value, dL/dR, dL/dt)``.
    """
    pred = points @ R.T + t
    src = points
    if symmetric:
        nn = nearest_indices(target_pts, pred)
        pred = pred[nn]
        src = points[nn]
    diff = pred - target_pts
    dist = np.linalg.norm(diff, axis=1)
    value = float(dist.mean())
    unit = np.divide(diff, dist[:, None], out=np.zeros_like(diff), where=dist[:, None] > 0)
    unit /= len(dist)
    return value, unit.T @ src, unit.sum(axis=0)


@dataclass
class PoseLoss:
    value: float
    grad_R: np.ndarray
    grad_t: np.ndarray
    grad_quat: np.ndarray


def loss_pose(gt: Pose, pred: Pose, model: ObjectModel, symmetric: bool = False) -> PoseLoss:
    """Average model-point distance between two poses (closest-point variant if ``symmetric``)."""
    if len(model.points) == 0:
        raise DataError("model has no points")
    target = transform_points(gt, model.points)
    value, dR, dt = pose_distance_loss(target, pred.R, pred.t, model.points, symmetric)
    return PoseLoss(value, dR, dt, raw_quat_grad(pred.quat, dR))


def loss_conf(conf_gt: np.ndarray, conf_pred: np.ndarray, lambda_obj: float = 1.0,
              lambda_noobj: float = 1.0):
    """Root of the cell-weighted squared confidence error; returns ``(value, dL/dconf_pred)``."""
    conf_gt = np.asarray(conf_gt, dtype=float)
    conf_pred = np.asarray(conf_pred, dtype=float)
    if conf_gt.shape != conf_pred.shape:
        raise ConfigurationError(f"confidence shapes differ: {conf_gt.shape} vs {conf_pred.shape}")
    lam = np.where(conf_gt > 0.5, lambda_obj, lambda_noobj)
    diff = conf_pred - conf_gt
    value = float(np.sqrt((lam * diff * diff).sum()))
    if value == 0.0:
        return 0.0, np.zeros_like(diff)
    return value, lam * diff / value


def loss_orth(A: np.ndarray):
    """Orthogonality penalty on N attention maps (N, H, W).

    ``||A~^T A~ - I||`` in squared Frobenius form, where ``A~`` holds the
    vectorised maps as columns. Returns ``(value, dL/dA)``.
    """
    A = np.asarray(A, dtype=float)
    N = A.shape[0]
    At = A.reshape(N, -1).T
    G = At.T @ At - np.eye(N)
    value = float((G * G).sum())
    grad = (4.0 * At @ G).T.reshape(A.shape)
    return value, grad


PART_NAMES = ("pose", "conf", "ref", "orth")


def loss_total(parts: dict[str, float], w: LossWeights):
    """Weighted sum of the four terms; returns ``(value, d total / d part)``."""
    coeffs = {"pose": w.alpha, "conf": w.beta, "ref": w.gamma, "orth": w.kappa}
    for name in PART_NAMES:
        v = parts.get(name, 0.0)
        if not np.isfinite(v):
            raise DivergenceError(f"loss term {name!r} is not finite ({v})")
    value = float(sum(coeffs[k] * parts.get(k, 0.0) for k in PART_NAMES))
    return value, coeffs
