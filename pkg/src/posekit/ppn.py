"""Pose proposal network: a grid encoder with three decoders (confidence,
rotation, translation), proposal decoding and duplicate removal."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import BehindCameraError, ConfigurationError, InvalidDepthError
from .geometry import (
    CameraIntrinsics,
    CellIndex,
    Pose,
    decode_cell_center,
    object_center,
    quat_to_rotmat,
    raw_quat_grad,
    recover_translation,
    transform_points,
)
from .losses import loss_conf, pose_distance_loss
from .nn import Conv2d, MaxPool2d, Network, ReLU, collect_parameters
from .nn.functional import _interp_matrix, sigmoid, softplus
from .objects import ObjectModel
from .renderer import projected_bbox

log = logging.getLogger(__name__)

QUAT_BIAS = np.array([1.0, 0.0, 0.0, 0.0])


@dataclass(frozen=True)
class PPNConfig:
    n_classes: int
    input_size: int = 104
    grid_size: int = 13
    embed_dim: int = 128
    base_channels: int = 8
    decoder_channels: int = 32
    seed: int = 0

    def __post_init__(self):
        ratio = self.input_size / self.grid_size
        if ratio != int(ratio) or int(ratio) & (int(ratio) - 1) or ratio < 4:
            raise ConfigurationError(
                f"input_size / grid_size must be a power of two >= 4, got {self.input_size}/{self.grid_size}")

    @property
    def n_pools(self) -> int:
        return int(round(math.log2(self.input_size / self.grid_size)))


@dataclass
class GridProposals:
    """Decoded per-cell proposals, indexed ``[row, col, class]``."""

    conf: np.ndarray        # S x S x C
    quat: np.ndarray        # S x S x C x 4
    center_raw: np.ndarray  # S x S x C x 2
    tz: np.ndarray          # S x S x C

    @property
    def grid_size(self) -> int:
        return self.conf.shape[0]


@dataclass
class Detection:
    class_id: int
    pose: Pose
    confidence: float
    cell: CellIndex
    bbox: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def to_json(self) -> str:
        return json.dumps({"class": int(self.class_id), "quat": [float(v) for v in self.pose.quat],
                           "t": [float(v) for v in self.pose.t], "conf": float(self.confidence),
                           "cell": [int(self.cell.row), int(self.cell.col)]})

    @classmethod
    def from_json(cls, line: str) -> "Detection":
        d = json.loads(line)
        return cls(int(d["class"]), Pose(d["quat"], d["t"]), float(d["conf"]), CellIndex(*d["cell"]),
                   np.asarray(d.get("bbox", np.zeros(4)), dtype=float))


class PoseProposalNet:
    """Encoder with a pass-through branch and three parallel decoders."""

    def __init__(self, cfg: PPNConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        C, S, size = cfg.n_classes, cfg.grid_size, cfg.input_size
        layers, ch_in, ch = [], 3, cfg.base_channels
        for i in range(cfg.n_pools - 1):
            layers += [Conv2d(ch_in, ch, 3, rng=rng), ReLU(), MaxPool2d(2)]
            ch_in, ch = ch, min(ch * 2, 64)
        self.stem = Network(layers, (3, size, size), "ppn.stem")
        fine_ch = ch_in
        mid = 2 * fine_ch
        self.trunk = Network([
            Conv2d(fine_ch, mid, 3, rng=rng), ReLU(), MaxPool2d(2),
            Conv2d(mid, 2 * mid, 3, rng=rng), ReLU(),
            Conv2d(2 * mid, mid, 1, rng=rng), ReLU(),
            Conv2d(mid, 2 * mid, 3, rng=rng), ReLU(),
        ], self.stem.output_shape, "ppn.trunk")
        # stride-2 2x2 conv: a learnable space-to-depth that keeps sub-cell position
        self.passthrough = Network([Conv2d(fine_ch, 4 * fine_ch, 2, stride=2, pad=0, rng=rng), ReLU()],
                                   self.stem.output_shape, "ppn.pass")
        fused = 2 * mid + 4 * fine_ch
        self.fuse = Network([Conv2d(fused, cfg.embed_dim, 3, rng=rng), ReLU()], (fused, S, S), "ppn.embed")
        d, h = cfg.embed_dim, cfg.decoder_channels

        def decoder(name, out):
            return Network([Conv2d(d, h, 3, rng=rng), ReLU(), Conv2d(h, out, 1, rng=rng)], (d, S, S), name)

        self.rot_head = decoder("ppn.rotation", 4 * C)
        self.trans_head = decoder("ppn.translation", 3 * C)
        self.conf_head = decoder("ppn.confidence", C)
        # final layers start at zero; confidences start at the prior of one
        # object per grid so the empty cells do not saturate rare classes
        for head in (self.rot_head, self.trans_head, self.conf_head):
            head.layers[-1].params["weight"].data[...] = 0.0
        prior = 1.0 / (S * S * C)
        self.conf_head.layers[-1].params["bias"].data[...] = math.log(prior / (1 - prior))
        self.nets = [self.stem, self.trunk, self.passthrough, self.fuse, self.rot_head, self.trans_head,
                     self.conf_head]
        self._trunk_ch = 2 * mid

    def parameters(self):
        return collect_parameters(*self.nets)

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def forward(self, images: np.ndarray) -> dict[str, np.ndarray]:
        """``images`` is (N, 3, H, W); returns raw decoder outputs."""
        fine = self.stem.forward(images)
        deep = self.trunk.forward(fine)
        skip = self.passthrough.forward(fine)
        F = self.fuse.forward(np.concatenate([deep, skip], axis=1))
        return {"quat": self.rot_head.forward(F), "trans": self.trans_head.forward(F),
                "conf": self.conf_head.forward(F)}

    def backward(self, grads: dict[str, np.ndarray]) -> None:
        dF = (self.rot_head.backward(grads["quat"]) + self.trans_head.backward(grads["trans"])
              + self.conf_head.backward(grads["conf"]))
        dcat = self.fuse.backward(dF)
        ddeep, dskip = dcat[:, :self._trunk_ch], dcat[:, self._trunk_ch:]
        dfine = self.trunk.backward(ddeep) + self.passthrough.backward(dskip)
        self.stem.backward(dfine)


def grids_from_raw(raw: dict[str, np.ndarray], index: int = 0) -> GridProposals:
    conf = sigmoid(raw["conf"][index]).transpose(1, 2, 0)
    C = conf.shape[-1]
    S = conf.shape[0]
    q = raw["quat"][index].reshape(C, 4, S, S).transpose(2, 3, 0, 1) + QUAT_BIAS
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    tr = raw["trans"][index].reshape(C, 3, S, S).transpose(2, 3, 0, 1)
    return GridProposals(conf, q, tr[..., :2].copy(), softplus(tr[..., 2]))


def resize_image(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of an H x W x 3 image."""
    H, W = image.shape[:2]
    if (H, W) == (height, width):
        return image
    Uy, Ux = _interp_matrix(H, height), _interp_matrix(W, width)
    return np.einsum("oh,hwc,pw->opc", Uy, image, Ux, optimize=True)


def to_network_input(images) -> np.ndarray:
    arr = np.asarray(images, dtype=float)
    if arr.ndim == 3:
        arr = arr[None]
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


def ppn_forward(image: np.ndarray, net: PoseProposalNet, K: CameraIntrinsics | None = None):
    """Grid proposals for one H x W x 3 image (resized to the network input if needed).

    Returns ``(grids, K_input)`` where ``K_input`` are the intrinsics of the
    resized image.
    """
    size = net.cfg.input_size
    H, W = image.shape[:2]
    resized = resize_image(image, size, size)
    raw = net.forward(to_network_input(resized))
    K_in = None if K is None else K.scaled(size / W, size / H)
    return grids_from_raw(raw), K_in


def decode_proposals(grids: GridProposals, K: CameraIntrinsics, models: list[ObjectModel],
                     conf_threshold: float = 0.5) -> list[Detection]:
    """One detection per (cell, class) whose confidence reaches ``conf_threshold``."""
    if not 0 <= conf_threshold <= 1:
        raise ValueError("conf_threshold must lie in [0, 1]")
    S = grids.grid_size
    dets, dropped = [], 0
    rows, cols, classes = np.nonzero(grids.conf >= conf_threshold)
    for r, c, k in zip(rows, cols, classes):
        cell = CellIndex(int(r), int(c))
        center = decode_cell_center(grids.center_raw[r, c, k], cell, (K.width, K.height), S)
        try:
            t = recover_translation(center, float(grids.tz[r, c, k]), K)
            pose = Pose(grids.quat[r, c, k], t)
            bbox = projected_bbox(models[k], pose, K)
        except (InvalidDepthError, BehindCameraError):
            dropped += 1
            continue
        dets.append(Detection(int(k), pose, float(grids.conf[r, c, k]), cell, bbox))
    if dropped:
        log.warning("dropped %d proposals with invalid depth", dropped)
    return dets


def box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union) if union > 0 else 0.0


def _rank_key(d: Detection):
    return (-d.confidence, d.cell.row, d.cell.col, d.class_id)


def nms_duplicates(dets: list[Detection], iou_threshold: float = 0.3) -> list[Detection]:
    """Per-class greedy suppression of boxes overlapping a more confident one."""
    kept: list[Detection] = []
    for d in sorted(dets, key=_rank_key):
        if all(k.class_id != d.class_id or box_iou(k.bbox, d.bbox) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def cell_of(center, K: CameraIntrinsics, grid_size: int) -> CellIndex | None:
    u, v = center
    if not (0 <= u < K.width and 0 <= v < K.height):
        return None
    col = min(int(u // (K.width / grid_size)), grid_size - 1)
    row = min(int(v // (K.height / grid_size)), grid_size - 1)
    return CellIndex(row, col)


def confidence_target(gt: list[tuple[int, Pose]], K: CameraIntrinsics, grid_size: int,
                      n_classes: int) -> np.ndarray:
    """Binary S x S x C map marking the cell holding each object's projected center."""
    target = np.zeros((grid_size, grid_size, n_classes))
    for cls, pose in gt:
        cell = cell_of(object_center(pose, K), K, grid_size)
        if cell is None:
            log.warning("object of class %d projects outside the image; skipped", cls)
            continue
        target[cell.row, cell.col, cls] = 1.0
    return target


@dataclass
class PPNLoss:
    pose: float
    conf: float
    grads: dict[str, np.ndarray]


def ppn_loss(raw: dict[str, np.ndarray], annotations: list[list[tuple[int, Pose]]], K: CameraIntrinsics,
             models: list[ObjectModel], lambda_obj: float, lambda_noobj: float,
             alpha: float = 1.0, beta: float = 1.0) -> PPNLoss:
    """Pose and confidence losses for a batch, with gradients of ``alpha*pose + beta*conf``
    w.r.t. the raw decoder outputs.

    The pose term is averaged over ground-truth objects, each evaluated at
    the cell that holds its projected center; the confidence term is one
    weighted norm over every cell of the batch.
    """
    N, C, S, _ = raw["conf"].shape
    grads = {k: np.zeros_like(v) for k, v in raw.items()}
    cw, ch = K.width / S, K.height / S
    entries = []
    for n, objs in enumerate(annotations):
        for cls, pose in objs:
            cell = cell_of(object_center(pose, K), K, S)
            if cell is not None:
                entries.append((n, cls, pose, cell))
    pose_total = 0.0
    for n, cls, gt, (r, c) in entries:
        model = models[cls]
        q_raw = raw["quat"][n, 4 * cls:4 * cls + 4, r, c] + QUAT_BIAS
        lx, ly, lz = raw["trans"][n, 3 * cls:3 * cls + 3, r, c]
        sx, sy = sigmoid(lx), sigmoid(ly)
        cx, cy = (sx + c) * cw, (sy + r) * ch
        tz = softplus(lz)
        t = np.array([(cx - K.px) * tz / K.fx, (cy - K.py) * tz / K.fy, tz])
        target = transform_points(gt, model.points)
        value, dR, dt = pose_distance_loss(target, quat_to_rotmat(q_raw), t, model.points,
                                           model.is_symmetric)
        pose_total += value
        scale = alpha / len(entries)
        grads["quat"][n, 4 * cls:4 * cls + 4, r, c] += scale * raw_quat_grad(q_raw, dR)
        dcx, dcy = dt[0] * tz / K.fx, dt[1] * tz / K.fy
        dtz = dt[2] + dt[0] * (cx - K.px) / K.fx + dt[1] * (cy - K.py) / K.fy
        grads["trans"][n, 3 * cls, r, c] += scale * dcx * cw * sx * (1 - sx)
        grads["trans"][n, 3 * cls + 1, r, c] += scale * dcy * ch * sy * (1 - sy)
        grads["trans"][n, 3 * cls + 2, r, c] += scale * dtz * sigmoid(lz)
    pose_loss = pose_total / len(entries) if entries else 0.0

    # one norm over the whole batch so the gradient goes where the error is
    target = np.stack([confidence_target(objs, K, S, C).transpose(2, 0, 1) for objs in annotations])
    pred = sigmoid(raw["conf"])
    conf_value, dpred = loss_conf(target, pred, lambda_obj, lambda_noobj)
    grads["conf"] = beta * dpred * pred * (1 - pred)
    return PPNLoss(pose_loss, conf_value, grads)
