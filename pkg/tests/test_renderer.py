import numpy as np
import pytest

from posekit.exceptions import DataError, OutOfViewError
from posekit.geometry import CameraIntrinsics, Pose, axis_angle_to_quat, project_points, random_quat, transform_points
from posekit.objects import ObjectModel, cube_mesh, make_object
from posekit.renderer import (
    correspondence_flow,
    crop_window,
    make_input_crops,
    projected_bbox,
    rasterize,
    read_ppm,
    read_raw,
    write_ppm,
    write_raw,
)

K = CameraIntrinsics(100, 100, 32, 32, 64, 64)
K640 = CameraIntrinsics(500, 500, 320, 240, 640, 480)


def triangle_model(verts, color=(1.0, 0.5, 0.25)):
    verts = np.asarray(verts, float)
    return ObjectModel.from_mesh(0, verts, [[0, 1, 2]], n_points=8, face_colors=[color])


def inside(p, a, b, c):
    def edge(u, v, w):
        return (v[0] - u[0]) * (w[1] - u[1]) - (v[1] - u[1]) * (w[0] - u[0])
    e = [edge(a, b, p), edge(b, c, p), edge(c, a, p)]
    return all(x > 0 for x in e) or all(x < 0 for x in e)


def test_empty_mesh_renders_nothing():
    m = ObjectModel(0, np.random.default_rng(0).normal(size=(8, 3)))
    out = rasterize(m, Pose(t=[0, 0, 1]), K)
    assert not out.mask.any()
    assert np.isinf(out.depth).all()


def test_single_triangle_mask_matches_half_space_oracle():
    verts = [[-0.103, -0.087, 0], [0.121, -0.052, 0], [0.013, 0.117, 0]]
    m = triangle_model(verts)
    pose = Pose(t=[0, 0, 1])
    out = rasterize(m, pose, K)
    a, b, c = project_points(transform_points(pose, verts), K)
    expected = np.array([[inside((j + 0.5, i + 0.5), a, b, c) for j in range(64)] for i in range(64)])
    assert np.array_equal(out.mask, expected)
    assert np.allclose(out.depth[out.mask], 1.0)


def test_nearer_triangle_wins():
    near = [[-0.1, -0.1, 0], [0.1, -0.1, 0], [0.0, 0.1, 0]]
    far = [[-0.2, -0.2, 0], [0.2, -0.2, 0], [0.0, 0.2, 0]]
    a = triangle_model(near, (1.0, 0.0, 0.0))
    b = triangle_model(far, (0.0, 0.0, 1.0))
    for order in ((a, Pose(t=[0, 0, 1]), b, Pose(t=[0, 0, 2])), (b, Pose(t=[0, 0, 2]), a, Pose(t=[0, 0, 1]))):
        out = rasterize(order[0], order[1], K)
        rasterize(order[2], order[3], K, out=out)
        front = rasterize(a, Pose(t=[0, 0, 1]), K).mask
        assert np.allclose(out.depth[front], 1.0)
        assert (out.rgb[front][:, 2] == 0).all()


def test_mask_and_depth_consistency():
    m = make_object("l_prism", 0)
    rng = np.random.default_rng(4)
    for _ in range(5):
        pose = Pose(random_quat(rng), [rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02), 0.4])
        out = rasterize(m, pose, K)
        assert np.array_equal(out.mask, np.isfinite(out.depth))
        assert (out.rgb[~out.mask] == 0).all()
        z = transform_points(pose, m.vertices)[:, 2]
        assert out.depth[out.mask].min() >= z.min() - 1e-9
        assert out.depth[out.mask].max() <= z.max() + 1e-9
        u0, v0, u1, v1 = projected_bbox(m, pose, K)
        rows, cols = np.nonzero(out.mask)
        assert cols.min() + 0.5 >= u0 and cols.max() + 0.5 <= u1
        assert rows.min() + 0.5 >= v0 and rows.max() + 0.5 <= v1


def test_rendering_is_deterministic():
    m = make_object("cube", 0)
    p = Pose(axis_angle_to_quat([1, 1, 0], 0.6), [0, 0, 0.4])
    a, b = rasterize(m, p, K), rasterize(m, p, K)
    assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.depth, b.depth)


def test_faces_crossing_near_plane_are_culled():
    m = triangle_model([[-0.1, 0, -0.5], [0.1, 0, 0.5], [0, 0.1, 0.5]])
    assert not rasterize(m, Pose(t=[0, 0, 0.2]), K).mask.any()


def test_bbox_examples():
    point = ObjectModel(0, np.zeros((4, 3)))
    box = projected_bbox(point, Pose(t=[0, 0, 1]), K640)
    assert np.allclose(box, [320, 240, 320, 240])
    v, f = cube_mesh(1.0)
    cube = ObjectModel.from_mesh(0, v, f, n_points=16)
    box = projected_bbox(cube, Pose(t=[0, 0, 2]), K640)
    corners = project_points(np.array([[x, y, z] for x in (-.5, .5) for y in (-.5, .5) for z in (1.5, 2.5)]), K640)
    assert np.allclose(box, [*corners.min(axis=0), *corners.max(axis=0)])
    padded = projected_bbox(cube, Pose(t=[0, 0, 2]), K640, pad=10)
    assert np.allclose(padded, box + [-10, -10, 10, 10])


def test_crop_origin_for_centered_object():
    m = make_object("cube", 0)
    image = np.random.default_rng(0).uniform(size=(480, 640, 3))
    crops = make_input_crops(image, m, Pose(t=[0, 0, 1.0]), K640, (256, 256))
    assert np.array_equal(crops.crop_origin, [320 - 128, 240 - 128])
    assert crops.image_crop.shape == crops.render_crop.shape == (256, 256, 3)
    assert (crops.image_crop[:20] == 0).all()


def test_crop_of_ground_truth_matches_render():
    m = make_object("tetrahedron", 0)
    pose = Pose(axis_angle_to_quat([0, 1, 1], 0.8), [0.01, 0.0, 0.5])
    image = rasterize(m, pose, K).rgb
    crops = make_input_crops(image, m, pose, K, (32, 32))
    mask = crops.render.mask
    assert np.abs(crops.image_crop[mask] - crops.render_crop[mask]).max() < 1e-12


def test_center_outside_image_raises():
    with pytest.raises(OutOfViewError):
        make_input_crops(np.zeros((64, 64, 3)), make_object("cube", 0), Pose(t=[1.0, 0, 0.5]), K)


def test_crop_window_zero_pads():
    img = np.arange(16.0).reshape(4, 4)
    out = crop_window(img, (-1, -1), 3, 3)
    assert np.array_equal(out, [[0, 0, 0], [0, 0, 1], [0, 4, 5]])


def test_flow_is_zero_at_ground_truth_and_a_shift_for_translations():
    m = make_object("cube", 0)
    gt = Pose(axis_angle_to_quat([1, 2, 0], 0.5), [0, 0, 0.5])
    assert np.abs(correspondence_flow(m, gt, gt, K)).max() < 1e-9
    cur = Pose(gt.quat, gt.t + [0.01, 0, 0])
    flow = correspondence_flow(m, gt, cur, K)
    out = rasterize(m, gt, K)
    mask = out.mask
    # a lateral shift moves each surface pixel by f * dx / z
    assert np.allclose(flow[0][mask], 100 * 0.01 / out.depth[mask], atol=1e-9)
    assert np.allclose(flow[1][mask], 0.0, atol=1e-9)
    assert (flow[:, ~mask] == 0).all()


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3)) / 255.0
    write_ppm(tmp_path / "a.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n7 5\n255\n")


def test_ppm_rejects_other_formats(tmp_path):
    (tmp_path / "b.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(DataError):
        read_ppm(tmp_path / "b.ppm")


def test_raw_round_trip(tmp_path):
    depth = np.array([[1.5, np.inf], [0.25, 2.0]])
    write_raw(tmp_path / "d.raw", depth)
    assert np.array_equal(read_raw(tmp_path / "d.raw"), depth)
    mask = np.array([[True, False]])
    write_raw(tmp_path / "m.raw", mask)
    assert np.array_equal(read_raw(tmp_path / "m.raw"), [[1, 0]])
    (tmp_path / "x.raw").write_bytes(b"nope")
    with pytest.raises(DataError):
        read_raw(tmp_path / "x.raw")
