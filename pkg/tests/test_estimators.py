import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from posekit.estimators import PoseProposalEstimator, PoseRefiner
from posekit.exceptions import DataError
from posekit.geometry import CameraIntrinsics, Pose, axis_angle_to_quat
from posekit.marn import RefinementSample
from posekit.objects import make_object
from posekit.renderer import rasterize
from posekit.scene import SceneConfig, generate_scene

K = CameraIntrinsics(200, 200, 52, 52, 104, 104)
CUBE = make_object("cube", 0, n_points=32)


def samples(n=2):
    gt = Pose(axis_angle_to_quat([1, 1, 0], 0.5), [0, 0, 0.5])
    image = rasterize(CUBE, gt, K).rgb
    return [RefinementSample(image, CUBE, K, Pose(axis_angle_to_quat([0, 1, 0], 0.1 * (i + 1))) @ gt, gt)
            for i in range(n)]


def test_get_params_and_clone():
    est = PoseProposalEstimator(steps=3, lr=1e-4)
    assert est.get_params()["steps"] == 3
    c = clone(est)
    assert c.get_params() == est.get_params() and c is not est
    ref = PoseRefiner(variant="v2", iterations=3).set_params(steps=5)
    assert ref.get_params()["steps"] == 5 and clone(ref).variant == "v2"


def test_not_fitted():
    with pytest.raises(NotFittedError):
        PoseProposalEstimator().predict(np.zeros((104, 104, 3)))
    with pytest.raises(NotFittedError):
        PoseRefiner().predict(samples(1))


def test_input_validation():
    cfg = SceneConfig()
    models = cfg.models()
    est = PoseProposalEstimator(models=models, intrinsics=cfg.intrinsics, steps=1)
    with pytest.raises(DataError):
        est.fit([np.zeros((10, 10))], [[]])
    with pytest.raises(DataError):
        est.fit([np.zeros((104, 104, 3))], [[], []])
    with pytest.raises(DataError):
        est.fit([np.zeros((104, 104, 3))], [[(9, Pose(t=[0, 0, 1]))]])
    with pytest.raises(DataError):
        est.fit([np.full((104, 104, 3), 2.0)], [[]])
    with pytest.raises(DataError):
        PoseProposalEstimator(models=models[::-1], intrinsics=cfg.intrinsics).fit([np.zeros((104, 104, 3))], [[]])
    with pytest.raises(DataError):
        PoseRefiner().fit([RefinementSample(np.zeros((104, 104, 3)), CUBE, K, Pose(t=[0, 0, 1]))])
    with pytest.raises(DataError):
        PoseRefiner().fit([])


def test_proposal_estimator_fit_predict():
    cfg = SceneConfig(seed=5)
    models = cfg.models()
    scenes = [generate_scene(cfg, i, models) for i in range(2)]
    # annotations may be given as pose objects, dicts or 4x4 matrices
    y = [[(c, p.matrix()) for c, p in scenes[0].annotations], [(c, p.to_dict()) for c, p in scenes[1].annotations]]
    est = PoseProposalEstimator(models=models, intrinsics=cfg.intrinsics, steps=2, embed_dim=16)
    est.fit([s.image for s in scenes], y)
    assert est.n_classes_ == 4 and len(est.fit_log_.pose_loss) == 2
    dets = est.predict([s.image for s in scenes])
    assert len(dets) == 2
    assert 0 <= est.score([s.image for s in scenes], y) <= 1


def test_refiner_fit_predict_transform():
    X = samples(2)
    ref = PoseRefiner(steps=2, crop_size=32).fit(X)
    assert len(ref.fit_log_.ref_loss) == 2
    poses = ref.predict(X)
    assert len(poses) == 2 and all(isinstance(p, Pose) for p in poses)
    moved = ref.transform(X)
    assert all(m.pose == p for m, p in zip(moved, poses))
    assert ref.score(X) <= 0
    assert ref.refine(X[0], iterations=3).n_renders == 3
