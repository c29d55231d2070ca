"""Training loops: joint proposal + refinement training and a standalone
refiner overfit loop, plus checkpoint assembly."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, DataError, DivergenceError, InvalidDepthError
from .geometry import object_center
from .losses import LossWeights, loss_total
from .marn import MARNConfig, MultiAttentionRefiner, RefinementSample, refinement_step
from .nn import Adam, assign_parameters, collect_parameters, cosine_lr, load_checkpoint, save_checkpoint
from .objects import ObjectModel
from .ppn import PPNConfig, PoseProposalNet, ppn_loss, resize_image, to_network_input
from .scene import Dataset, perturb_pose

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "lambda_obj", "lambda_noobj", "lr", "L_pose", "L_conf", "L_ref", "L_orth",
               "total")


@dataclass(frozen=True)
class TrainConfig:
    """Joint training settings; ``lambda_switch_epoch = -1`` switches at half the epochs."""

    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    alpha: float = 0.1
    beta: float = 0.05
    gamma: float = 0.1
    kappa: float = 0.01
    lambda_obj_early: float = 5.0
    lambda_noobj_early: float = 0.5
    lambda_switch_epoch: int = -1
    flow_freeze_epochs: int = 2
    refine_stages: int = 2
    n_attention: int = 4
    variant: str = "v4"
    flow_mode: str = "learned"
    crop_size: int = 32
    embed_dim: int = 8
    dc_bound: float = 16.0
    ang_range: tuple[float, float] = (5.0, 45.0)
    trans_range: float = 1.0
    input_size: int = 104
    grid_size: int = 13
    ppn_embed_dim: int = 128
    ppn_base_channels: int = 8
    train_ppn: bool = True
    train_marn: bool = True
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.refine_stages, self.n_attention) < 1:
            raise ConfigurationError("epochs, batch_size, refine_stages and n_attention must be >= 1")
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        if self.flow_freeze_epochs < 0:
            raise ConfigurationError("flow_freeze_epochs must be >= 0")
        self.weights  # validates the loss weights

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma, self.kappa, self.lambda_obj_early,
                           self.lambda_noobj_early)

    @property
    def switch_epoch(self) -> int:
        return self.epochs // 2 if self.lambda_switch_epoch < 0 else self.lambda_switch_epoch

    def lambdas(self, epoch: int) -> tuple[float, float]:
        if epoch < self.switch_epoch:
            return self.lambda_obj_early, self.lambda_noobj_early
        return 1.0, 1.0

    def ppn_config(self, n_classes: int) -> PPNConfig:
        return PPNConfig(n_classes, self.input_size, self.grid_size, self.ppn_embed_dim,
                         self.ppn_base_channels, seed=self.seed)

    def marn_config(self) -> MARNConfig:
        return MARNConfig(crop_size=self.crop_size, embed_dim=self.embed_dim, n_attention=self.n_attention,
                          variant=self.variant, flow_mode=self.flow_mode, dc_bound=self.dc_bound,
                          seed=self.seed + 1)


@dataclass
class TrainResult:
    ppn: PoseProposalNet
    marn: MultiAttentionRefiner
    log: list[dict] = field(default_factory=list)

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.log:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def _marn_samples(images, annotations, models, K_list, rng, cfg: TrainConfig) -> list[RefinementSample]:
    out = []
    for img, objs, K in zip(images, annotations, K_list):
        for cls, gt in objs:
            init = perturb_pose(gt, models[cls], rng, cfg.ang_range, cfg.trans_range)
            out.append(RefinementSample(img, models[cls], K, init, gt))
    return out


def _refine_stages(marn, samples, stages, gamma, kappa, update_flow):
    """Run ``stages`` chained refinement steps; later stages start from the
    (detached) output of the previous one. Returns mean L_ref and L_orth."""
    refs, orths = [], []
    for _ in range(stages):
        samples = [s for s in samples if _crop_ok(marn, s)]
        if not samples:
            break
        try:
            r = refinement_step(marn, samples, gamma / stages, kappa / stages, update_flow)
        except InvalidDepthError:
            break
        refs.append(r.ref_loss)
        orths.append(r.orth_loss)
        samples = [RefinementSample(s.image, s.model, s.K, p, s.gt_pose) for s, p in zip(samples, r.poses)]
    if not refs:
        return 0.0, 0.0
    return float(np.mean(refs)), float(np.mean(orths))


def _crop_ok(marn, s: RefinementSample) -> bool:
    if s.pose.tz <= 1e-3:
        return False
    c = object_center(s.pose, s.K)
    return bool(0 <= c[0] < s.K.width and 0 <= c[1] < s.K.height)


def train(cfg: TrainConfig, data: Dataset, images: list[np.ndarray] | None = None) -> TrainResult:
    """Joint optimisation of the weighted four-term objective with one Adam.

    The proposal network sees each batch resized to its input size; every
    ground-truth object in the batch yields a perturbed pose that the
    refiner corrects over ``refine_stages`` chained steps. Rendering is not
    differentiable, so the two networks only meet in the summed loss.
    """
    models = data.models
    if not models:
        raise DataError("dataset has no object models")
    images = images if images is not None else [data.image(i) for i in range(len(data))]
    if not images:
        raise DataError("dataset is empty")
    ppn = PoseProposalNet(cfg.ppn_config(len(models)))
    marn = MultiAttentionRefiner(cfg.marn_config())
    params = collect_parameters(*ppn.nets, *marn.nets)
    opt = Adam(params, cfg.lr)
    flow_names = marn.flow_parameter_names()
    rng = np.random.default_rng([cfg.seed, 7])
    w = cfg.weights
    n = len(images)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    size = cfg.input_size
    scaled = [resize_image(im, size, size) for im in images]
    K_in = [r.K.scaled(size / r.K.width, size / r.K.height) for r in data.records]
    if len({k for k in K_in}) != 1:
        raise DataError("all training images must share intrinsics after resizing")
    result = TrainResult(ppn, marn)
    step = 0
    for epoch in range(cfg.epochs):
        lam_obj, lam_noobj = cfg.lambdas(epoch)
        order = rng.permutation(n)
        frozen = flow_names if epoch < cfg.flow_freeze_epochs else set()
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            opt.zero_grad()
            parts = {"pose": 0.0, "conf": 0.0, "ref": 0.0, "orth": 0.0}
            anns = [data.records[i].objects for i in idx]
            if cfg.train_ppn:
                raw = ppn.forward(to_network_input([scaled[i] for i in idx]))
                L = ppn_loss(raw, anns, K_in[0], models, lam_obj, lam_noobj, w.alpha, w.beta)
                parts["pose"], parts["conf"] = L.pose, L.conf
                _check_finite(parts, w, epoch, step)
                ppn.backward(L.grads)
            if cfg.train_marn:
                samples = _marn_samples([images[i] for i in idx], anns, models,
                                        [data.records[i].K for i in idx], rng, cfg)
                if samples:
                    parts["ref"], parts["orth"] = _refine_stages(marn, samples, cfg.refine_stages, w.gamma,
                                                                 w.kappa, update_flow=not frozen)
            total, _ = _check_finite(parts, w, epoch, step)
            lr = cosine_lr(cfg.lr, step, total_steps)
            opt.step(lr, frozen=frozen)
            result.log.append({"epoch": epoch, "step": step, "lambda_obj": lam_obj, "lambda_noobj": lam_noobj,
                               "lr": lr, "L_pose": parts["pose"], "L_conf": parts["conf"],
                               "L_ref": parts["ref"], "L_orth": parts["orth"], "total": total})
            step += 1
        log.info("epoch %d: total %.5f", epoch, result.log[-1]["total"])
    return result


def _check_finite(parts, w: LossWeights, epoch, step):
    try:
        return loss_total(parts, w)
    except DivergenceError as exc:
        raise DivergenceError(f"epoch {epoch}, step {step}: {exc}; last terms {parts}") from None


# --- standalone proposal-network training -------------------------------------

@dataclass
class ProposalFitLog:
    pose_loss: list[float] = field(default_factory=list)
    conf_loss: list[float] = field(default_factory=list)
    lambda_obj: list[float] = field(default_factory=list)


def fit_proposals(ppn: PoseProposalNet, images: list[np.ndarray], annotations, K, models: list[ObjectModel],
                  steps: int, lr: float = 5e-4, weights: LossWeights = LossWeights(), batch_size: int = 8,
                  switch_fraction: float = 0.5, seed: int = 0) -> ProposalFitLog:
    """Adam on the pose and confidence terms; ``K`` are the intrinsics of ``images``.

    Object cells are up-weighted (``lambda_obj`` / ``lambda_noobj`` from
    ``weights``) for the first ``switch_fraction`` of the steps, then all
    cells weigh one.
    """
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    size = ppn.cfg.input_size
    K_in = K.scaled(size / K.width, size / K.height)
    X = to_network_input([resize_image(im, size, size) for im in images])
    n = len(X)
    rng = np.random.default_rng([seed, 11])
    opt = Adam(ppn.parameters(), lr)
    fit_log = ProposalFitLog()
    switch = int(round(switch_fraction * steps))
    order = rng.permutation(n)
    pos = 0
    for step in range(steps):
        if n <= batch_size:
            idx = np.arange(n)
        else:
            if pos + batch_size > n:
                order, pos = rng.permutation(n), 0
            idx, pos = order[pos:pos + batch_size], pos + batch_size
        lam = (weights.lambda_obj, weights.lambda_noobj) if step < switch else (1.0, 1.0)
        opt.zero_grad()
        raw = ppn.forward(X[idx])
        L = ppn_loss(raw, [annotations[i] for i in idx], K_in, models, lam[0], lam[1], weights.alpha,
                     weights.beta)
        if not (np.isfinite(L.pose) and np.isfinite(L.conf)):
            raise DivergenceError(f"step {step}: proposal loss is not finite")
        ppn.backward(L.grads)
        opt.step(cosine_lr(lr, step, steps))
        fit_log.pose_loss.append(L.pose)
        fit_log.conf_loss.append(L.conf)
        fit_log.lambda_obj.append(lam[0])
    return fit_log


# --- standalone refiner training ---------------------------------------------

@dataclass
class RefinerFitLog:
    ref_loss: list[float] = field(default_factory=list)
    orth_loss: list[float] = field(default_factory=list)


def fit_refiner(marn: MultiAttentionRefiner, samples: list[RefinementSample], steps: int, lr: float = 1e-3,
                stages: int = 2, weights: LossWeights = LossWeights(), flow_freeze_steps: int = 0,
                fit_log: RefinerFitLog | None = None) -> RefinerFitLog:
    """Full-batch Adam on a fixed set of refinement samples."""
    if steps < 1:
        raise ConfigurationError("steps must be >= 1")
    fit_log = fit_log or RefinerFitLog()
    opt = Adam(marn.parameters(), lr)
    flow_names = marn.flow_parameter_names()
    for step in range(steps):
        opt.zero_grad()
        frozen = flow_names if step < flow_freeze_steps else set()
        ref, orth = _refine_stages(marn, samples, stages, weights.gamma, weights.kappa, update_flow=not frozen)
        if not (np.isfinite(ref) and np.isfinite(orth)):
            raise DivergenceError(f"step {step}: refinement loss is not finite")
        fit_log.ref_loss.append(ref)
        fit_log.orth_loss.append(orth)
        opt.step(cosine_lr(lr, step, steps), frozen=frozen)
    return fit_log


# --- checkpoints -------------------------------------------------------------

def save_models(path, ppn: PoseProposalNet, marn: MultiAttentionRefiner, models: list[ObjectModel],
                train_cfg: TrainConfig | None = None) -> None:
    meta = {
        "ppn": asdict(ppn.cfg),
        "marn": asdict(marn.cfg),
        "classes": [m.name for m in models],
        "train": asdict(train_cfg) if train_cfg is not None else None,
    }
    save_checkpoint(path, collect_parameters(*ppn.nets, *marn.nets), meta)


def load_models(path) -> tuple[PoseProposalNet, MultiAttentionRefiner, dict]:
    arrays, meta = load_checkpoint(path)
    try:
        ppn = PoseProposalNet(PPNConfig(**meta["ppn"]))
        marn = MultiAttentionRefiner(MARNConfig(**meta["marn"]))
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: checkpoint metadata incomplete ({exc})") from exc
    assign_parameters(collect_parameters(*ppn.nets, *marn.nets), arrays)
    return ppn, marn, meta


def write_log(path, result: TrainResult) -> None:
    Path(path).write_text(result.log_csv())


__all__ = ["LOG_COLUMNS", "ProposalFitLog", "RefinerFitLog", "fit_proposals", "TrainConfig", "TrainResult", "fit_refiner", "load_models",
           "save_models", "train", "write_log"]
