"""Pose accuracy metrics: ADD / ADD-S, 2D projection error, threshold
accuracy and the area under the ADD accuracy-threshold curve."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError, UndefinedMetricError
from .geometry import CameraIntrinsics, Pose, project_points, transform_points
from .losses import nearest_indices
from .objects import ObjectModel

PROJ2D_THRESHOLD_PX = 5.0
ADD_DIAMETER_FRACTION = 0.1
AUC_MAX_THRESHOLD = 0.10


def metric_add(gt: Pose, pred: Pose, model: ObjectModel, symmetric: bool = False) -> float:
    if len(model.points) == 0:
        raise DataError("model has no points")
    a = transform_points(gt, model.points)
    b = transform_points(pred, model.points)
    if symmetric:
        b = b[nearest_indices(a, b)]
    return float(np.linalg.norm(a - b, axis=1).mean())


def metric_proj2d(gt: Pose, pred: Pose, model: ObjectModel, K: CameraIntrinsics,
                  symmetric: bool = False) -> float:
    """Mean pixel distance of projected model points; min over symmetric ground truths."""
    pred_uv = project_points(transform_points(pred, model.points), K)
    candidates = model.symmetries if symmetric else [Pose()]
    best = np.inf
    for sym in candidates:
        gt_uv = project_points(transform_points(gt @ sym, model.points), K)
        best = min(best, float(np.linalg.norm(gt_uv - pred_uv, axis=1).mean()))
    return best


def accuracy_at_threshold(errors, threshold: float) -> float:
    """Fraction of errors strictly below ``threshold``."""
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise UndefinedMetricError("accuracy of an empty error list is undefined")
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    return float((errors < threshold).mean())


def auc_add(errors, max_threshold: float = AUC_MAX_THRESHOLD) -> float:
    """Normalised area under accuracy(threshold) on ``[0, max_threshold]``.

    The curve is a step function jumping by ``1/n`` just after each error,
    so the area is integrated exactly between consecutive sorted errors.
    """
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise UndefinedMetricError("AUC of an empty error list is undefined")
    if not max_threshold > 0:
        raise ValueError("max_threshold must be positive")
    e = np.sort(np.clip(errors, 0.0, max_threshold))
    n = e.size
    knots = np.append(e, max_threshold)
    widths = np.diff(knots)
    levels = np.arange(1, n + 1) / n
    return float((widths * levels).sum() / max_threshold)


@dataclass
class ObjectErrors:
    add: list[float] = field(default_factory=list)
    proj2d: list[float] = field(default_factory=list)


@dataclass
class MetricReport:
    per_object: dict[str, dict[str, float]]
    means: dict[str, float]
    thresholds: dict[str, float]
    counts: dict[str, int]

    @classmethod
    def from_errors(cls, errors: dict[str, ObjectErrors], diameters: dict[str, float],
                    proj2d_threshold: float = PROJ2D_THRESHOLD_PX,
                    add_fraction: float = ADD_DIAMETER_FRACTION,
                    auc_max: float = AUC_MAX_THRESHOLD) -> "MetricReport":
        per_object, counts = {}, {}
        for name in sorted(errors):
            e = errors[name]
            per_object[name] = {
                "add_acc": accuracy_at_threshold(e.add, add_fraction * diameters[name]),
                "proj2d_acc": accuracy_at_threshold(e.proj2d, proj2d_threshold),
                "auc": auc_add(e.add, auc_max),
            }
            counts[name] = len(e.add)
        keys = ("add_acc", "proj2d_acc", "auc")
        means = {k: float(np.mean([v[k] for v in per_object.values()])) if per_object else float("nan")
                 for k in keys}
        thresholds = {"proj2d_px": proj2d_threshold, "add_diameter_fraction": add_fraction,
                      "auc_max_m": auc_max}
        return cls(per_object, means, thresholds, counts)

    def to_dict(self) -> dict:
        return {"per_object": self.per_object, "means": self.means, "thresholds": self.thresholds,
                "counts": self.counts}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def to_table(self) -> str:
        header = f"{'object':<16}{'n':>6}{'ADD(-S)':>10}{'2D-Proj':>10}{'AUC':>10}"
        rows = [header, "-" * len(header)]
        for name, v in self.per_object.items():
            rows.append(f"{name:<16}{self.counts[name]:>6}{100 * v['add_acc']:>10.2f}"
                        f"{100 * v['proj2d_acc']:>10.2f}{100 * v['auc']:>10.2f}")
        rows.append("-" * len(header))
        m = self.means
        rows.append(f"{'MEAN':<16}{sum(self.counts.values()):>6}{100 * m['add_acc']:>10.2f}"
                    f"{100 * m['proj2d_acc']:>10.2f}{100 * m['auc']:>10.2f}")
        return "\n".join(rows)
