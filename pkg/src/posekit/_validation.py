"""Input checks shared by the estimators."""
from __future__ import annotations

import numpy as np

from .exceptions import DataError
from .geometry import CameraIntrinsics, Pose
from .marn import RefinementSample
from .objects import ObjectModel


def check_image(image, name: str = "image") -> np.ndarray:
    """An H x W x 3 float image with finite values in [0, 1]."""
    arr = np.asarray(image, dtype=float)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise DataError(f"{name} contains non-finite values")
    if arr.min() < 0 or arr.max() > 1:
        raise DataError(f"{name} values must lie in [0, 1]")
    return arr


def check_images(X) -> list[np.ndarray]:
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = [X]
    images = [check_image(x, f"X[{i}]") for i, x in enumerate(X)]
    if not images:
        raise DataError("need at least one image")
    return images


def check_pose(pose) -> Pose:
    if isinstance(pose, Pose):
        return pose
    if isinstance(pose, dict):
        return Pose.from_dict(pose)
    arr = np.asarray(pose, dtype=float)
    if arr.shape == (4, 4):
        return Pose.from_matrix(arr)
    if arr.shape == (7,):
        return Pose(arr[:4], arr[4:])
    raise DataError(f"cannot interpret {type(pose).__name__} of shape {arr.shape} as a pose")


def check_annotations(y, n_images: int, n_classes: int) -> list[list[tuple[int, Pose]]]:
    """Per-image lists of ``(class_id, pose)`` pairs."""
    y = list(y)
    if len(y) != n_images:
        raise DataError(f"got {len(y)} annotation lists for {n_images} images")
    out = []
    for objs in y:
        row = []
        for cls, pose in objs:
            if not 0 <= int(cls) < n_classes:
                raise DataError(f"class id {cls} outside 0..{n_classes - 1}")
            row.append((int(cls), check_pose(pose)))
        out.append(row)
    return out


def check_models(models) -> list[ObjectModel]:
    models = list(models)
    if not models:
        raise DataError("need at least one object model")
    for i, m in enumerate(models):
        if not isinstance(m, ObjectModel):
            raise DataError(f"models[{i}] is not an ObjectModel")
        if m.id != i:
            raise DataError(f"models[{i}] has id {m.id}; ids must equal list positions")
    return models


def check_intrinsics(K, image: np.ndarray) -> CameraIntrinsics:
    if not isinstance(K, CameraIntrinsics):
        raise DataError("intrinsics must be a CameraIntrinsics")
    if (K.height, K.width) != image.shape[:2]:
        raise DataError(f"intrinsics are for {K.width}x{K.height}, image is {image.shape[1]}x{image.shape[0]}")
    return K


def check_samples(X, need_gt: bool = False) -> list[RefinementSample]:
    samples = list(X)
    if not samples:
        raise DataError("need at least one refinement sample")
    for i, s in enumerate(samples):
        if not isinstance(s, RefinementSample):
            raise DataError(f"X[{i}] is not a RefinementSample")
        check_image(s.image, f"X[{i}].image")
        check_intrinsics(s.K, s.image)
        if need_gt and s.gt_pose is None:
            raise DataError(f"X[{i}] has no ground-truth pose")
    return samples
