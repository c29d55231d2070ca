"""Multi-attentional refinement network.

A shared embedding network encodes the observed and rendered crops, the
render features are warped along a render-to-image flow, spatial softmax
attention maps weight the flow-augmented image features, and a residual
head regresses a rotation quaternion, a pixel shift of the object center
and a depth step. Applying the residual and re-rendering gives one
refinement iteration.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, InvalidDepthError, OutOfViewError
from .geometry import (
    CameraIntrinsics,
    Pose,
    compose_refinement,
    object_center,
    quat_to_rotmat,
    raw_quat_grad,
    transform_points,
)
from .losses import loss_orth, pose_distance_loss
from .metrics import metric_add
from .nn import Conv2d, Linear, MaxPool2d, Network, ReLU, Upsample2x, collect_parameters
from .nn.functional import (
    bilinear_warp,
    bilinear_warp_backward,
    spatial_softmax,
    spatial_softmax_backward,
    upsample_bilinear,
    upsample_bilinear_backward,
)
from .objects import ObjectModel
from .renderer import CropPair, correspondence_flow, make_input_crops

QUAT_BIAS = np.array([1.0, 0.0, 0.0, 0.0])

VARIANTS = {
    "v1": dict(flow=False, attention=0),   # visual features only
    "v2": dict(flow=True, attention=0),    # flow, plain concatenation
    "v3": dict(flow=True, attention=1),    # flow + a single attention map
    "v4": dict(flow=True, attention=None),  # flow + multiple attention maps
}


@dataclass(frozen=True)
class MARNConfig:
    crop_size: int = 32
    embed_dim: int = 8
    n_attention: int = 4
    variant: str = "v4"
    flow_mode: str = "oracle"
    dc_bound: float = 16.0
    pad: float = 10.0
    base_channels: int = 8
    hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}")
        if self.flow_mode not in ("oracle", "learned"):
            raise ConfigurationError(f"flow_mode must be 'oracle' or 'learned', got {self.flow_mode!r}")
        if self.crop_size % 16:
            raise ConfigurationError("crop_size must be divisible by 16")
        if self.n_attention < 1:
            raise ConfigurationError("n_attention must be at least 1")

    @property
    def uses_flow(self) -> bool:
        return VARIANTS[self.variant]["flow"]

    @property
    def n_maps(self) -> int:
        n = VARIANTS[self.variant]["attention"]
        return self.n_attention if n is None else n


@dataclass
class ResidualPose:
    dq: np.ndarray
    dc: np.ndarray
    dtz: float


@dataclass
class AttentionStack:
    maps: np.ndarray  # N x H x W


class MultiAttentionRefiner:
    def __init__(self, cfg: MARNConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        H = W = cfg.crop_size
        d, b = cfg.embed_dim, cfg.base_channels
        enc_ch = [b, 2 * b, 2 * b, 2 * b]
        layers, c_in = [], 3
        for c in enc_ch:
            layers += [Conv2d(c_in, c, 3, rng=rng), ReLU(), MaxPool2d(2)]
            c_in = c
        dec_ch = [2 * b, 2 * b, b, d]
        for i, c in enumerate(dec_ch):
            layers += [Upsample2x(), Conv2d(c_in, c, 3, rng=rng)]
            if i < len(dec_ch) - 1:
                layers.append(ReLU())
            c_in = c
        self.embed = Network(layers, (3, H, W), "marn.embed")

        self.flownet = None
        if cfg.flow_mode == "learned" and cfg.uses_flow:
            self.flownet = Network([
                Conv2d(6, 2 * b, 3, rng=rng), ReLU(), MaxPool2d(2),
                Conv2d(2 * b, 2 * b, 3, rng=rng), ReLU(), MaxPool2d(2),
                Conv2d(2 * b, 2 * b, 3, rng=rng), ReLU(),
                Conv2d(2 * b, 2, 3, rng=rng),
            ], (6, H, W), "marn.flow")

        N = cfg.n_maps
        self.attn = None
        if N:
            self.attn = Network([Conv2d(d, d, 1, rng=rng), ReLU(), Conv2d(d, N, 1, rng=rng)], (d, H, W), "marn.attn")
            c_head = (d + 2) * N
        elif cfg.uses_flow:
            c_head = (d + 2) + d
        else:
            c_head = 2 * d
        self.head_conv = Network([
            Conv2d(c_head, 2 * b, 3, stride=2, rng=rng), ReLU(),
            Conv2d(2 * b, 2 * b, 3, stride=2, rng=rng), ReLU(),
            Conv2d(2 * b, 8, 3, stride=2, rng=rng), ReLU(),
        ], (c_head, H, W), "marn.reduce")
        self.head_fc = Network([Linear(int(np.prod(self.head_conv.output_shape)), cfg.hidden, rng=rng), ReLU()],
                               self.head_conv.output_shape, "marn.shared_fc")
        self.rot_fc = Network([Linear(cfg.hidden, 4, rng=rng)], (cfg.hidden,), "marn.rotation")
        self.trans_fc = Network([Linear(cfg.hidden, 3, rng=rng)], (cfg.hidden,), "marn.translation")
        for net in (self.rot_fc, self.trans_fc):
            for p in net.parameters().values():
                p.data[...] = 0.0
        # attention maps sum to one, so their features are ~1/(H W) in size
        self.head_scale = float(H * W) if N else 1.0

    @property
    def nets(self):
        return [n for n in (self.embed, self.flownet, self.attn, self.head_conv, self.head_fc,
                            self.rot_fc, self.trans_fc) if n is not None]

    def parameters(self):
        return collect_parameters(*self.nets)

    def flow_parameter_names(self) -> set[str]:
        return set(self.flownet.parameters()) if self.flownet is not None else set()

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    # --- blocks ------------------------------------------------------------

    def extract_features(self, image_crops: np.ndarray, render_crops: np.ndarray,
                         flow: np.ndarray | None = None):
        """Shared embeddings of both crops and the render-to-image flow."""
        B = len(image_crops)
        F = self.embed.forward(np.concatenate([image_crops, render_crops], axis=0))
        F_im, F_r = F[:B], F[B:]
        self._flow_cache = None
        if self.cfg.uses_flow and flow is None:
            if self.flownet is None:
                raise ConfigurationError("oracle flow mode needs a flow field")
            low = self.flownet.forward(np.concatenate([render_crops, image_crops], axis=1))
            flow, self._flow_cache = upsample_bilinear(low, image_crops.shape[2:])
        return F_im, F_r, flow

    def forward(self, image_crops: np.ndarray, render_crops: np.ndarray, flow: np.ndarray | None = None):
        """Raw residual outputs for a batch of crop pairs (B, 3, H, W)."""
        F_im, F_r, flow = self.extract_features(image_crops, render_crops, flow)
        d = self.cfg.embed_dim
        c = {"d": d}
        if not self.cfg.uses_flow:
            Fbar = np.concatenate([F_im, F_r], axis=1)
            A = None
        else:
            F_w, c["warp"] = fuse_features_warp(F_r, flow)
            F_plus = np.concatenate([F_im, flow], axis=1)
            c["F_plus"] = F_plus
            if self.attn is None:
                Fbar = np.concatenate([F_plus, F_w], axis=1)
                A = None
            else:
                s = self.attn.forward(F_w)
                A, _ = spatial_softmax(s)
                Fbar = attend(F_plus, A)
        c["A"] = A
        h = self.head_fc.forward(self.head_conv.forward(Fbar * self.head_scale))
        q_raw = self.rot_fc.forward(h) + QUAT_BIAS
        tr = self.trans_fc.forward(h)
        c["q_raw"], c["tr"] = q_raw, tr
        self._cache = c
        return q_raw, tr, A

    def residuals(self, q_raw: np.ndarray, tr: np.ndarray) -> list[ResidualPose]:
        out = []
        for q, t in zip(q_raw, tr):
            out.append(ResidualPose(q / np.linalg.norm(q), self.cfg.dc_bound * np.tanh(t[:2]), float(t[2])))
        return out

    def backward(self, d_q_raw: np.ndarray, d_tr: np.ndarray, d_A: np.ndarray | None = None,
                 update_flow: bool = True) -> None:
        c = self._cache
        d = c["d"]
        dh = self.rot_fc.backward(d_q_raw) + self.trans_fc.backward(d_tr)
        dFbar = self.head_conv.backward(self.head_fc.backward(dh)) * self.head_scale
        if not self.cfg.uses_flow:
            dF_im, dF_r = dFbar[:, :d], dFbar[:, d:]
            dflow = None
        else:
            F_plus, A = c["F_plus"], c["A"]
            if A is None:
                dF_plus, dF_w = dFbar[:, :d + 2], dFbar[:, d + 2:]
            else:
                dF_plus, dA = attend_backward(F_plus, A, dFbar)
                if d_A is not None:
                    dA = dA + d_A
                dF_w = self.attn.backward(spatial_softmax_backward(A, dA))
            dF_r, dflow_w = bilinear_warp_backward(c["warp"], dF_w)
            dF_im = dF_plus[:, :d]
            dflow = dF_plus[:, d:] + dflow_w
        self.embed.backward(np.concatenate([dF_im, dF_r], axis=0))
        if self.flownet is not None and dflow is not None and update_flow:
            self.flownet.backward(upsample_bilinear_backward(self._flow_cache, dflow))


def fuse_features_warp(F_r: np.ndarray, flow: np.ndarray):
    return bilinear_warp(F_r, flow)


def fuse_features(F_im: np.ndarray, F_r: np.ndarray, flow: np.ndarray):
    """Warped render features and flow-augmented image features (d_em + 2 channels)."""
    F_w, _ = bilinear_warp(F_r, flow)
    return F_w, np.concatenate([F_im, flow], axis=1)


def attention_maps(s: np.ndarray) -> AttentionStack:
    """Spatial softmax of summarized maps ``s`` (N, H, W)."""
    a, _ = spatial_softmax(np.asarray(s, dtype=float)[None])
    return AttentionStack(a[0])


def attend(F_plus: np.ndarray, A: np.ndarray) -> np.ndarray:
    """Each attention map times the feature stack, concatenated map by map.

    ``F_plus`` is (B, D, H, W) and ``A`` is (B, N, H, W); the result has
    ``D * N`` channels ordered ``[map 0 features, map 1 features, ...]``.
    """
    B, D, H, W = F_plus.shape
    return (A[:, :, None] * F_plus[:, None]).reshape(B, A.shape[1] * D, H, W)


def attend_backward(F_plus: np.ndarray, A: np.ndarray, dFbar: np.ndarray):
    B, D, H, W = F_plus.shape
    g = dFbar.reshape(B, A.shape[1], D, H, W)
    dF_plus = (g * A[:, :, None]).sum(axis=1)
    dA = (g * F_plus[:, None]).sum(axis=2)
    return dF_plus, dA


# --- training / inference on crop states ----------------------------------

@dataclass
class RefinementSample:
    """One refinement input: an observed image, an object and a current pose."""

    image: np.ndarray
    model: ObjectModel
    K: CameraIntrinsics
    pose: Pose
    gt_pose: Pose | None = None


@dataclass
class PreparedBatch:
    image_crops: np.ndarray
    render_crops: np.ndarray
    flow: np.ndarray | None
    crops: list[CropPair]


def prepare_batch(marn: MultiAttentionRefiner, samples: list[RefinementSample]) -> PreparedBatch:
    cfg = marn.cfg
    size = (cfg.crop_size, cfg.crop_size)
    crops = [make_input_crops(s.image, s.model, s.pose, s.K, size, cfg.pad) for s in samples]
    img = np.stack([c.image_crop.transpose(2, 0, 1) for c in crops])
    ren = np.stack([c.render_crop.transpose(2, 0, 1) for c in crops])
    flow = None
    if cfg.uses_flow and cfg.flow_mode == "oracle":
        if any(s.gt_pose is None for s in samples):
            raise ConfigurationError("oracle flow mode needs ground-truth poses")
        flow = np.stack([correspondence_flow(s.model, s.gt_pose, s.pose, c.crop_K)
                         for s, c in zip(samples, crops)])
    return PreparedBatch(img, ren, flow, crops)


@dataclass
class StepResult:
    ref_loss: float
    orth_loss: float
    poses: list[Pose]


def refinement_step(marn: MultiAttentionRefiner, samples: list[RefinementSample], gamma: float = 1.0,
                    kappa: float = 0.0, update_flow: bool = True, batch: PreparedBatch | None = None) -> StepResult:
    """Forward and backward of ``gamma * L_ref + kappa * L_orth`` averaged over ``samples``.

    Gradients accumulate into the network parameters; the refined poses
    (detached) are returned for multi-stage training.
    """
    batch = batch or prepare_batch(marn, samples)
    q_raw, tr, A = marn.forward(batch.image_crops, batch.render_crops, batch.flow)
    B = len(samples)
    d_q = np.zeros_like(q_raw)
    d_tr = np.zeros_like(tr)
    ref_total, new_poses = 0.0, []
    for b, (s, res) in enumerate(zip(samples, marn.residuals(q_raw, tr))):
        K = s.K
        center = object_center(s.pose, K) + res.dc
        tz_new = s.pose.tz + res.dtz
        if tz_new <= 1e-3:
            raise InvalidDepthError(f"refined depth {tz_new} is not positive")
        t_new = np.array([(center[0] - K.px) * tz_new / K.fx, (center[1] - K.py) * tz_new / K.fy, tz_new])
        R_hat = s.pose.R
        R_new = quat_to_rotmat(q_raw[b]) @ R_hat
        target = transform_points(s.gt_pose, s.model.points)
        value, dR, dt = pose_distance_loss(target, R_new, t_new, s.model.points, s.model.is_symmetric)
        ref_total += value
        scale = gamma / B
        d_q[b] = scale * raw_quat_grad(q_raw[b], dR @ R_hat.T)
        ddc = np.array([dt[0] * tz_new / K.fx, dt[1] * tz_new / K.fy])
        ddtz = dt[2] + dt[0] * (center[0] - K.px) / K.fx + dt[1] * (center[1] - K.py) / K.fy
        d_tr[b, :2] = scale * ddc * marn.cfg.dc_bound * (1 - np.tanh(tr[b, :2]) ** 2)
        d_tr[b, 2] = scale * ddtz
        new_poses.append(compose_refinement(s.pose, res.dq, res.dc, res.dtz, K))
    orth_total = 0.0
    d_A = None
    if A is not None:
        d_A = np.zeros_like(A)
        for b in range(B):
            v, g = loss_orth(A[b])
            orth_total += v
            d_A[b] = (kappa / B) * g
    marn.backward(d_q, d_tr, d_A, update_flow=update_flow)
    return StepResult(ref_total / B, orth_total / B, new_poses)


def predict_residuals(marn: MultiAttentionRefiner, samples: list[RefinementSample]):
    batch = prepare_batch(marn, samples)
    q_raw, tr, A = marn.forward(batch.image_crops, batch.render_crops, batch.flow)
    return marn.residuals(q_raw, tr), A, batch


@dataclass
class RefinementResult:
    pose: Pose
    history: list[Pose]
    n_renders: int
    stopped_early: bool = False
    records: list[dict] = field(default_factory=list)

    def trace_jsonl(self) -> str:
        return "\n".join(json.dumps(r, sort_keys=True) for r in self.records)


def refine(pose: Pose, image: np.ndarray, model: ObjectModel, K: CameraIntrinsics,
           marn: MultiAttentionRefiner, iterations: int, gt_pose: Pose | None = None) -> RefinementResult:
    """Iteratively refine ``pose``; every iteration re-renders at the current estimate.

    If an update would leave the view (center outside the image or depth
    not positive) the loop stops and the last valid pose is returned with
    ``stopped_early`` set.
    """
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    if not pose.tz > 0:
        raise InvalidDepthError("initial pose has non-positive depth")
    history = [pose]
    records = [_record(0, pose, model, gt_pose)]
    renders = 0
    stopped = False
    for it in range(1, iterations + 1):
        sample = RefinementSample(image, model, K, pose, gt_pose)
        try:
            (res,), _, _ = predict_residuals(marn, [sample])
            renders += 1
            new_pose = compose_refinement(pose, res.dq, res.dc, res.dtz, K)
            c = object_center(new_pose, K)
            if not (0 <= c[0] < K.width and 0 <= c[1] < K.height):
                raise OutOfViewError("refined center left the image")
        except (InvalidDepthError, OutOfViewError):
            stopped = True
            break
        pose = new_pose
        history.append(pose)
        records.append(_record(it, pose, model, gt_pose))
    return RefinementResult(pose, history, renders, stopped, records)


def _record(it: int, pose: Pose, model: ObjectModel, gt_pose: Pose | None) -> dict:
    rec = {"iter": it, "quat": [float(v) for v in pose.quat], "t": [float(v) for v in pose.t]}
    if gt_pose is not None:
        rec["add_to_gt"] = metric_add(gt_pose, pose, model, model.is_symmetric)
    return rec
