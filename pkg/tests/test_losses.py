import numpy as np
import pytest

from posekit.exceptions import ConfigurationError, DataError, DivergenceError
from posekit.geometry import Pose, axis_angle_to_quat, random_quat
from posekit.losses import LossWeights, loss_conf, loss_orth, loss_pose, loss_total
from posekit.nn import check_function
from posekit.objects import ObjectModel, make_object


def three_points():
    pts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    return ObjectModel(0, pts)


def test_pose_loss_examples():
    m = three_points()
    p = Pose(axis_angle_to_quat([1, 0, 0], 0.3), [0, 0, 1])
    assert loss_pose(p, p, m).value == 0
    assert loss_pose(Pose(), Pose(t=[0.1, 0, 0]), m).value == pytest.approx(0.1)


def square_model():
    pts = np.array([[1.0, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]])
    quarter = Pose(axis_angle_to_quat([0, 0, 1], np.pi / 2))
    return ObjectModel(0, pts, symmetries=[quarter], is_symmetric=True)


def test_symmetric_loss_absorbs_symmetry():
    m = square_model()
    gt = Pose(random_quat(np.random.default_rng(0)), [0, 0, 1])
    for sym in m.symmetries:
        assert loss_pose(gt, gt @ sym, m, symmetric=True).value < 1e-12


def test_symmetric_loss_never_exceeds_plain():
    rng = np.random.default_rng(1)
    m = ObjectModel(0, rng.normal(size=(20, 3)))
    for _ in range(50):
        a = Pose(random_quat(rng), rng.normal(size=3))
        b = Pose(random_quat(rng), rng.normal(size=3))
        assert loss_pose(a, b, m, True).value <= loss_pose(a, b, m).value + 1e-12


def test_pose_loss_permutation_invariant():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(30, 3))
    a = Pose(random_quat(rng), rng.normal(size=3))
    b = Pose(random_quat(rng), rng.normal(size=3))
    v1 = loss_pose(a, b, ObjectModel(0, pts)).value
    v2 = loss_pose(a, b, ObjectModel(0, pts[rng.permutation(30)])).value
    assert v1 == pytest.approx(v2, abs=1e-12)


@pytest.mark.parametrize("symmetric", [False, True])
def test_pose_loss_gradient(symmetric):
    rng = np.random.default_rng(3)
    m = ObjectModel(0, rng.normal(size=(16, 3)))
    gt = Pose(random_quat(rng), rng.normal(size=3))
    for _ in range(5):
        q0 = Pose(rng.normal(size=4)).quat.copy()
        t0 = rng.normal(size=3)

        def f(q, t):
            out = loss_pose(gt, Pose(q, t), m, symmetric)
            # grad_quat is taken at the unit quaternion; rescale for the raw one
            return out.value, (out.grad_quat / np.linalg.norm(q), out.grad_t)
        assert check_function(f, [q0, t0], eps=1e-7) < 1e-4


def test_conf_loss_examples():
    gt = np.zeros((3, 3, 2))
    gt[1, 1, 0] = 1
    assert loss_conf(gt, gt, 5, 0.5)[0] == 0
    pred = np.full(gt.shape, 0.5)
    plain, _ = loss_conf(gt, pred, 1, 1)
    assert plain == pytest.approx(np.linalg.norm(gt - pred))
    obj_only = np.where(gt > 0, pred, gt)
    bg_only = np.where(gt > 0, gt, pred)
    assert loss_conf(gt, obj_only, 5, 0.5)[0] ** 2 == pytest.approx(10 * 0.25 * 0.5 * 1 / 1 * 1)
    assert loss_conf(gt, bg_only, 5, 0.5)[0] ** 2 == pytest.approx(0.5 * 0.25 * 17)
    with pytest.raises(ConfigurationError):
        loss_conf(gt, pred[:2])


def test_conf_loss_gradient():
    rng = np.random.default_rng(4)
    gt = (rng.uniform(size=(4, 4, 3)) > 0.8).astype(float)
    for _ in range(5):
        pred = rng.uniform(size=gt.shape)
        assert check_function(lambda p: (loss_conf(gt, p, 5, 0.5)[0], (loss_conf(gt, p, 5, 0.5)[1],)),
                              [pred]) < 1e-4


def test_orth_examples():
    A = np.zeros((2, 3, 3))
    A[0, 0, 0] = A[1, 2, 1] = 1
    assert loss_orth(A)[0] == 0.0
    B = np.zeros((2, 3, 3))
    B[:, 1, 1] = 1
    assert loss_orth(B)[0] == 2.0
    # squared Frobenius form: (0.25 - 1)^2
    assert loss_orth(np.full((1, 2, 2), 0.25))[0] == pytest.approx(0.5625)


def test_orth_nonnegative_and_gradient():
    rng = np.random.default_rng(5)
    for _ in range(5):
        A = rng.uniform(size=(3, 4, 4))
        assert loss_orth(A)[0] >= 0
        assert check_function(lambda a: (loss_orth(a)[0], (loss_orth(a)[1],)), [A]) < 1e-4


def test_total_loss():
    w = LossWeights()
    assert loss_total({}, w)[0] == 0
    value, coeffs = loss_total({"pose": 1, "conf": 1, "ref": 1, "orth": 1}, w)
    assert value == pytest.approx(0.26)
    assert coeffs == {"pose": 0.1, "conf": 0.05, "ref": 0.1, "orth": 0.01}
    assert loss_total({"orth": 7.0}, LossWeights(kappa=0))[0] == 0
    with pytest.raises(DivergenceError):
        loss_total({"pose": np.nan}, w)
    with pytest.raises(ConfigurationError):
        LossWeights(alpha=-1)


def test_empty_model_rejected():
    class Empty:
        points = np.zeros((0, 3))
    with pytest.raises(DataError):
        loss_pose(Pose(), Pose(), Empty())
