import numpy as np
import pytest

from posekit.exceptions import UndefinedMetricError
from posekit.geometry import CameraIntrinsics, Pose, axis_angle_to_quat, random_quat
from posekit.metrics import (
    MetricReport,
    ObjectErrors,
    accuracy_at_threshold,
    auc_add,
    metric_add,
    metric_proj2d,
)
from posekit.objects import ObjectModel, make_object

K = CameraIntrinsics(500, 500, 320, 240, 640, 480)


def brute_add(gt, pred, pts, symmetric):
    a = pts @ gt.R.T + gt.t
    b = pts @ pred.R.T + pred.t
    if not symmetric:
        return np.mean([np.sqrt(((a[i] - b[i]) ** 2).sum()) for i in range(len(pts))])
    return np.mean([min(np.sqrt(((a[i] - b[j]) ** 2).sum()) for j in range(len(pts))) for i in range(len(pts))])


def brute_auc(errors, cap):
    # integrate the step curve by walking every breakpoint
    pts = sorted({0.0, cap, *[min(max(e, 0), cap) for e in errors]})
    area = 0.0
    for lo, hi in zip(pts, pts[1:]):
        mid = 0.5 * (lo + hi)
        area += (hi - lo) * np.mean([e < mid for e in errors])
    return area / cap


def test_add_examples():
    m = make_object("cube", 0)
    p = Pose(random_quat(np.random.default_rng(0)), [0, 0, 1])
    assert metric_add(p, p, m) == 0
    quarter = Pose(axis_angle_to_quat([0, 0, 1], np.pi / 2))
    square = ObjectModel(0, [[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]], symmetries=[quarter], is_symmetric=True)
    assert metric_add(p, p @ quarter, square, True) < 1e-12
    assert metric_add(p, p @ quarter, square, False) > 1


def test_add_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(100):
        pts = rng.normal(size=(rng.integers(4, 12), 3))
        m = ObjectModel(0, pts)
        a = Pose(random_quat(rng), rng.normal(size=3))
        b = Pose(random_quat(rng), rng.normal(size=3))
        for sym in (False, True):
            assert abs(metric_add(a, b, m, sym) - brute_add(a, b, pts, sym)) < 1e-12
        assert metric_add(a, b, m, True) <= metric_add(a, b, m, False) + 1e-15


def test_proj2d_examples():
    m = make_object("tetrahedron", 0)
    p = Pose(random_quat(np.random.default_rng(2)), [0, 0, 1])
    assert metric_proj2d(p, p, m, K) == 0
    # a planar model facing the camera at unit depth: a 6 mm shift moves every projection 3 px
    flat = ObjectModel(0, np.c_[np.random.default_rng(3).normal(scale=0.05, size=(20, 2)), np.zeros(20)])
    q = Pose(t=[0, 0, 1])
    assert metric_proj2d(q, Pose(t=[0.006, 0, 1]), flat, K) == pytest.approx(3.0)
    quarter = Pose(axis_angle_to_quat([0, 0, 1], np.pi / 2))
    square = ObjectModel(0, [[1, 0, 0], [0, 1, 0], [-1, 0, 0], [0, -1, 0]], symmetries=[quarter], is_symmetric=True)
    assert metric_proj2d(q, q @ quarter, square, K, True) < 1e-9
    assert metric_proj2d(q, q @ quarter, square, K, False) > 100


def test_accuracy():
    assert accuracy_at_threshold([1, 2, 3, 4], 3) == 0.5
    errs = np.random.default_rng(0).uniform(size=50)
    accs = [accuracy_at_threshold(errs, t) for t in np.linspace(0.01, 1.2, 30)]
    assert all(a <= b for a, b in zip(accs, accs[1:]))
    with pytest.raises(UndefinedMetricError):
        accuracy_at_threshold([], 1)
    with pytest.raises(ValueError):
        accuracy_at_threshold([1.0], 0)


def test_auc_examples():
    assert auc_add([0, 0, 0]) == 1
    assert auc_add([0.2, 0.5]) == 0
    assert auc_add([0.02, 0.06], 0.10) == pytest.approx(0.6, abs=1e-12)
    with pytest.raises(UndefinedMetricError):
        auc_add([])


def test_auc_matches_step_integral():
    rng = np.random.default_rng(3)
    for _ in range(50):
        errs = rng.uniform(0, 0.15, size=rng.integers(1, 20))
        assert abs(auc_add(errs, 0.1) - brute_auc(errs, 0.1)) < 1e-12


def test_auc_monotone_in_errors():
    rng = np.random.default_rng(4)
    errs = rng.uniform(0, 0.12, size=10)
    base = auc_add(errs)
    for i in range(10):
        e = errs.copy()
        e[i] *= 0.5
        assert auc_add(e) >= base - 1e-15


def test_report_json_and_table():
    errs = {"cube": ObjectErrors(add=[0.001, 0.5], proj2d=[1.0, 9.0])}
    r = MetricReport.from_errors(errs, {"cube": 0.1})
    assert r.per_object["cube"] == {"add_acc": 0.5, "proj2d_acc": 0.5, "auc": pytest.approx(0.495)}
    assert '"add_acc": 0.5' in r.to_json()
    assert "MEAN" in r.to_table()
