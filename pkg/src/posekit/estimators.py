"""Scikit-learn style estimators wrapping the proposal network and the refiner::

    est = PoseProposalEstimator(models=models, intrinsics=K, steps=800)
    est.fit(images, annotations).predict(images)      # detections per image
    ref = PoseRefiner(iterations=2, steps=120).fit(samples)
    ref.predict(samples)                              # refined poses
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_annotations, check_images, check_intrinsics, check_models, check_samples
from .geometry import CameraIntrinsics, Pose
from .losses import LossWeights
from .marn import MARNConfig, MultiAttentionRefiner, RefinementSample, refine
from .metrics import PROJ2D_THRESHOLD_PX, accuracy_at_threshold, metric_add, metric_proj2d
from .ppn import Detection, PPNConfig, PoseProposalNet, decode_proposals, nms_duplicates, ppn_forward
from .training import fit_proposals, fit_refiner


class PoseProposalEstimator(BaseEstimator):
    """Grid pose-proposal network: ``fit(images, annotations)``, ``predict(images)``.

    ``annotations[i]`` lists ``(class_id, pose)`` pairs for image ``i``;
    every image shares ``intrinsics``. ``predict`` returns the detections
    left after confidence thresholding and duplicate removal.
    """

    def __init__(self, models=None, intrinsics: CameraIntrinsics | None = None, input_size: int = 104,
                 grid_size: int = 13, embed_dim: int = 128, base_channels: int = 8, steps: int = 800,
                 lr: float = 5e-4, batch_size: int = 8, alpha: float = 0.1, beta: float = 0.05,
                 lambda_obj: float = 5.0, lambda_noobj: float = 0.5, switch_fraction: float = 0.5,
                 conf_threshold: float = 0.5, iou_threshold: float = 0.3, seed: int = 0):
        self.models = models
        self.intrinsics = intrinsics
        self.input_size = input_size
        self.grid_size = grid_size
        self.embed_dim = embed_dim
        self.base_channels = base_channels
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.alpha = alpha
        self.beta = beta
        self.lambda_obj = lambda_obj
        self.lambda_noobj = lambda_noobj
        self.switch_fraction = switch_fraction
        self.conf_threshold = conf_threshold
        self.iou_threshold = iou_threshold
        self.seed = seed

    def _config(self, n_classes: int) -> PPNConfig:
        return PPNConfig(n_classes, self.input_size, self.grid_size, self.embed_dim, self.base_channels,
                         seed=self.seed)

    def fit(self, X, y):
        models = check_models(self.models)
        images = check_images(X)
        K = check_intrinsics(self.intrinsics, images[0])
        for im in images[1:]:
            check_intrinsics(K, im)
        annotations = check_annotations(y, len(images), len(models))
        self.network_ = PoseProposalNet(self._config(len(models)))
        w = LossWeights(alpha=self.alpha, beta=self.beta, lambda_obj=self.lambda_obj,
                        lambda_noobj=self.lambda_noobj)
        self.fit_log_ = fit_proposals(self.network_, images, annotations, K, models, self.steps, self.lr, w,
                                      self.batch_size, self.switch_fraction, self.seed)
        self.n_classes_ = len(models)
        return self

    def predict(self, X) -> list[list[Detection]]:
        check_is_fitted(self, "network_")
        images = check_images(X)
        out = []
        for im in images:
            K = check_intrinsics(self.intrinsics, im)
            grids, K_in = ppn_forward(im, self.network_, K)
            dets = decode_proposals(grids, K_in, self.models, self.conf_threshold)
            out.append(nms_duplicates(dets, self.iou_threshold))
        return out

    def score(self, X, y, threshold: float = PROJ2D_THRESHOLD_PX) -> float:
        """Fraction of ground-truth objects whose best same-class detection
        has a 2D projection error below ``threshold`` pixels."""
        images = check_images(X)
        annotations = check_annotations(y, len(images), len(self.models))
        errors = []
        for dets, objs in zip(self.predict(images), annotations):
            for cls, gt in objs:
                m = self.models[cls]
                errs = [metric_proj2d(gt, d.pose, m, self.intrinsics, m.is_symmetric)
                        for d in dets if d.class_id == cls]
                errors.append(min(errs, default=np.inf))
        return accuracy_at_threshold(errors, threshold)


class PoseRefiner(BaseEstimator):
    """Render-and-compare refiner: ``fit(samples)``, ``predict(samples)``.

    Each sample is a :class:`RefinementSample` (image, model, intrinsics,
    current pose, ground truth). Fitting runs full-batch Adam on the fixed
    samples; ``transform`` returns the samples with refined poses so
    refiners can be chained.
    """

    def __init__(self, variant: str = "v4", flow_mode: str = "oracle", n_attention: int = 4,
                 crop_size: int = 32, embed_dim: int = 8, dc_bound: float = 16.0, pad: float = 10.0,
                 steps: int = 120, lr: float = 1e-3, stages: int = 2, iterations: int = 1,
                 gamma: float = 0.1, kappa: float = 0.01, flow_freeze_steps: int = 0, seed: int = 0):
        self.variant = variant
        self.flow_mode = flow_mode
        self.n_attention = n_attention
        self.crop_size = crop_size
        self.embed_dim = embed_dim
        self.dc_bound = dc_bound
        self.pad = pad
        self.steps = steps
        self.lr = lr
        self.stages = stages
        self.iterations = iterations
        self.gamma = gamma
        self.kappa = kappa
        self.flow_freeze_steps = flow_freeze_steps
        self.seed = seed

    def _config(self) -> MARNConfig:
        return MARNConfig(crop_size=self.crop_size, embed_dim=self.embed_dim, n_attention=self.n_attention,
                          variant=self.variant, flow_mode=self.flow_mode, dc_bound=self.dc_bound, pad=self.pad,
                          seed=self.seed)

    def fit(self, X, y=None):
        samples = check_samples(X, need_gt=True)
        self.network_ = MultiAttentionRefiner(self._config())
        w = LossWeights(gamma=self.gamma, kappa=self.kappa)
        self.fit_log_ = fit_refiner(self.network_, samples, self.steps, self.lr, self.stages, w,
                                    self.flow_freeze_steps)
        return self

    def refine(self, sample: RefinementSample, iterations: int | None = None):
        """Full refinement result (history, trace, render count) for one sample."""
        check_is_fitted(self, "network_")
        iterations = self.iterations if iterations is None else iterations
        return refine(sample.pose, sample.image, sample.model, sample.K, self.network_, iterations,
                      sample.gt_pose)

    def predict(self, X, iterations: int | None = None) -> list[Pose]:
        samples = check_samples(X, need_gt=self.flow_mode == "oracle")
        return [self.refine(s, iterations).pose for s in samples]

    def transform(self, X) -> list[RefinementSample]:
        samples = check_samples(X, need_gt=self.flow_mode == "oracle")
        return [RefinementSample(s.image, s.model, s.K, p, s.gt_pose)
                for s, p in zip(samples, self.predict(samples))]

    def score(self, X, y=None) -> float:
        """Negative median ADD(-S) after refinement (higher is better)."""
        samples = check_samples(X, need_gt=True)
        adds = [metric_add(s.gt_pose, p, s.model, s.model.is_symmetric)
                for s, p in zip(samples, self.predict(samples))]
        return -float(np.median(adds))
