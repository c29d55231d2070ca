"""Evaluation driver: proposals, duplicate removal, optional refinement and
metric aggregation over a dataset."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .exceptions import ConfigurationError, DataError
from .geometry import CameraIntrinsics, CellIndex, object_center
from .marn import MultiAttentionRefiner, refine
from .metrics import PROJ2D_THRESHOLD_PX, MetricReport, ObjectErrors, metric_add, metric_proj2d
from .objects import ObjectModel
from .ppn import Detection, cell_of, PoseProposalNet, decode_proposals, nms_duplicates, ppn_forward
from .renderer import projected_bbox
from .scene import Dataset, ManifestRecord

Detector = Callable[[np.ndarray, ManifestRecord], list[Detection]]


def ppn_detector(ppn: PoseProposalNet, models: list[ObjectModel], conf_threshold: float = 0.5,
                 iou_threshold: float = 0.3) -> Detector:
    def detect(image: np.ndarray, record: ManifestRecord) -> list[Detection]:
        grids, K_in = ppn_forward(image, ppn, record.K)
        return nms_duplicates(decode_proposals(grids, K_in, models, conf_threshold), iou_threshold)
    return detect


def oracle_detector(models: list[ObjectModel], grid_size: int = 13) -> Detector:
    """Stub returning the ground truth itself, for upper-bound checks."""
    def detect(image: np.ndarray, record: ManifestRecord) -> list[Detection]:
        out = []
        for cls, pose in record.objects:
            cell = cell_of(object_center(pose, record.K), record.K, grid_size) or CellIndex(0, 0)
            out.append(Detection(cls, pose, 1.0, cell, projected_bbox(models[cls], pose, record.K)))
        return out
    return detect


def match_detections(record: ManifestRecord, dets: list[Detection]) -> list[Detection | None]:
    """Assign each ground-truth object the unused same-class detection whose
    center is nearest; ``None`` when the class has no detection left."""
    used: set[int] = set()
    out = []
    for cls, gt in record.objects:
        c_gt = object_center(gt, record.K)
        best, best_d = None, np.inf
        for i, d in enumerate(dets):
            if i in used or d.class_id != cls or d.pose.tz <= 0:
                continue
            dist = float(np.linalg.norm(object_center(d.pose, record.K) - c_gt))
            if dist < best_d:
                best, best_d = i, dist
        if best is not None:
            used.add(best)
        out.append(dets[best] if best is not None else None)
    return out


@dataclass
class EvalRecord:
    image: str
    class_id: int
    detected: bool
    add: float
    proj2d: float
    n_renders: int

    def to_json(self) -> str:
        return json.dumps({"image": self.image, "class": self.class_id, "detected": self.detected,
                           "add": self.add, "proj2d": self.proj2d, "n_renders": self.n_renders},
                          sort_keys=True)


def evaluate(data: Dataset, detector: Detector, marn: MultiAttentionRefiner | None = None,
             iterations: int = 0, proj2d_threshold: float = PROJ2D_THRESHOLD_PX,
             images: list[np.ndarray] | None = None) -> tuple[MetricReport, list[EvalRecord]]:
    """Detect, optionally refine ``iterations`` times, and score every ground-truth object.

    Missed objects count with infinite error, so they lower every accuracy.
    """
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    if iterations and marn is None:
        raise ConfigurationError("refinement iterations need a refiner")
    models = data.models
    errors = {m.name: ObjectErrors() for m in models}
    records = []
    for i, rec in enumerate(data.records):
        image = images[i] if images is not None else data.image(i)
        dets = detector(image, rec)
        for (cls, gt), det in zip(rec.objects, match_detections(rec, dets)):
            model = models[cls]
            if det is None:
                add = proj = float("inf")
                renders = 0
            else:
                pose, renders = det.pose, 0
                if iterations:
                    res = refine(pose, image, model, rec.K, marn, iterations,
                                 gt if marn.cfg.flow_mode == "oracle" else None)
                    pose, renders = res.pose, res.n_renders
                add = metric_add(gt, pose, model, model.is_symmetric)
                proj = _safe_proj2d(gt, pose, model, rec.K)
            errors[model.name].add.append(add)
            errors[model.name].proj2d.append(proj)
            records.append(EvalRecord(rec.image, cls, det is not None, add, proj, renders))
    errors = {k: v for k, v in errors.items() if v.add}
    diameters = {m.name: m.diameter for m in models}
    return MetricReport.from_errors(errors, diameters, proj2d_threshold=proj2d_threshold), records


def _safe_proj2d(gt, pose, model, K: CameraIntrinsics) -> float:
    try:
        return metric_proj2d(gt, pose, model, K, model.is_symmetric)
    except ValueError:
        return float("inf")


def check_compatible(meta: dict, data: Dataset, ablation: str = "none") -> None:
    """Checkpoint classes must match the dataset models; an ablation flag must
    name the variant the refiner was trained as."""
    classes = meta.get("classes")
    names = [m.name for m in data.models]
    if classes != names:
        raise DataError(f"checkpoint classes {classes} do not match dataset models {names}")
    trained = meta.get("marn", {}).get("variant")
    if ablation != "none" and ablation != trained:
        raise ConfigurationError(f"checkpoint refiner is variant {trained!r}, not {ablation!r}; "
                                 f"train with variant={ablation} to evaluate that ablation")
