import numpy as np
import pytest
from scipy.stats import kstest

from posekit.exceptions import ConfigurationError, DataError
from posekit.geometry import Pose, random_quat, rotation_angle
from posekit.objects import make_object
from posekit.renderer import rasterize
from posekit.scene import (
    SceneConfig,
    config_from_pairs,
    dump_config,
    generate_scene,
    perturb_pose,
    read_config_file,
    read_dataset,
    write_dataset,
)


def test_scene_is_deterministic():
    cfg = SceneConfig(seed=3)
    a, b = generate_scene(cfg, 5), generate_scene(cfg, 5)
    assert np.array_equal(a.image, b.image)
    assert [(c, p.to_dict()) for c, p in a.annotations] == [(c, p.to_dict()) for c, p in b.annotations]
    assert not np.array_equal(a.image, generate_scene(cfg, 6).image)
    assert not np.array_equal(a.image, generate_scene(SceneConfig(seed=4), 5).image)


def test_empty_object_set_gives_background():
    s = generate_scene(SceneConfig(objects=(), background="flat"), 0)
    assert s.annotations == [] and not s.render.mask.any()
    assert np.allclose(s.image, s.image[0, 0])


def test_nearer_object_occludes():
    cfg = SceneConfig(objects_per_scene=(2, 2), depth_range=(0.3, 0.7), margin=0.4)
    models = cfg.models()
    checked = 0
    for i in range(10):
        s = generate_scene(cfg, i, models)
        (c0, p0), (c1, p1) = s.annotations
        r0, r1 = rasterize(models[c0], p0, s.K), rasterize(models[c1], p1, s.K)
        both = r0.mask & r1.mask
        if not both.any():
            continue
        checked += 1
        near0 = r0.depth < r1.depth
        assert np.array_equal(s.render.depth[both], np.minimum(r0.depth, r1.depth)[both])
        assert np.array_equal(s.image[both & near0], r0.rgb[both & near0])
        assert np.array_equal(s.image[both & ~near0], r1.rgb[both & ~near0])
    assert checked >= 3


def test_annotations_project_inside_margin():
    cfg = SceneConfig()
    for i in range(20):
        s = generate_scene(cfg, i)
        (_, p), = s.annotations
        u = s.K.fx * p.t[0] / p.t[2] + s.K.px
        assert cfg.margin * 104 - 1e-9 <= u <= (1 - cfg.margin) * 104 + 1e-9
        assert cfg.depth_range[0] <= p.tz <= cfg.depth_range[1]


def test_zero_perturbation_is_identity():
    m = make_object("cube", 0)
    p = Pose(random_quat(np.random.default_rng(0)), [0.01, 0.02, 0.5])
    q = perturb_pose(p, m, np.random.default_rng(1), (0, 0), 0)
    assert q == p


def test_fixed_angle_perturbation():
    m = make_object("cube", 0)
    rng = np.random.default_rng(2)
    p = Pose(random_quat(rng), [0, 0, 0.5])
    for _ in range(20):
        q = perturb_pose(p, m, rng, (30, 30), 0)
        assert abs(np.rad2deg(rotation_angle(q.R @ p.R.T)) - 30) < 1e-6
        assert np.array_equal(q.t, p.t)


def test_translation_offset_bounded_by_diameter():
    m = make_object("cube", 0)
    rng = np.random.default_rng(3)
    p = Pose(t=[0, 0, 0.5])
    offsets = [np.linalg.norm(perturb_pose(p, m, rng, (5, 45), 1.0).t - p.t) for _ in range(500)]
    assert max(offsets) <= m.diameter + 1e-12
    assert max(offsets) > 0.8 * m.diameter


def test_angle_distribution_is_uniform_on_range():
    m = make_object("cube", 0)
    rng = np.random.default_rng(4)
    p = Pose(random_quat(rng), [0, 0, 0.5])
    angles = [np.rad2deg(rotation_angle(perturb_pose(p, m, rng, (5, 45), 0.5).R @ p.R.T))
              for _ in range(10000)]
    assert 5 - 1e-9 <= min(angles) and max(angles) <= 45 + 1e-9
    assert kstest(angles, "uniform", args=(5, 40)).pvalue > 1e-3


def test_perturbation_resamples_then_fails():
    m = make_object("cube", 0)
    with pytest.raises(DataError):
        perturb_pose(Pose(t=[0, 0, -1.0]), m, np.random.default_rng(0), (5, 10), 0.1)
    with pytest.raises(ConfigurationError):
        perturb_pose(Pose(t=[0, 0, 1.0]), m, np.random.default_rng(0), (10, 5), 0.1)


def test_scene_config_validation():
    with pytest.raises(ConfigurationError):
        SceneConfig(depth_range=(0.0, 1.0))
    with pytest.raises(ConfigurationError):
        SceneConfig(objects=("teapot",))
    with pytest.raises(ConfigurationError):
        SceneConfig(background="photo")


def test_dataset_round_trip(tmp_path):
    cfg = SceneConfig(objects=("cube", "sphere"), seed=2)
    written = write_dataset(cfg, tmp_path / "d", 3)
    data = read_dataset(tmp_path / "d")
    assert len(data) == 3 and [m.name for m in data.models] == ["cube", "sphere"]
    for i, rec in enumerate(data.records):
        assert rec.objects[0][1] == written.records[i].objects[0][1]
        assert np.allclose(data.image(i), generate_scene(cfg, i).image, atol=0.5 / 255)
    assert (tmp_path / "d" / "scene.cfg").read_text() == dump_config(cfg)


def test_dataset_errors(tmp_path):
    with pytest.raises(DataError):
        read_dataset(tmp_path)
    write_dataset(SceneConfig(), tmp_path / "d", 1)
    (tmp_path / "d" / "images" / "00000.ppm").unlink()
    with pytest.raises(DataError):
        read_dataset(tmp_path / "d")


def test_config_file_parsing(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# scene\nscene.seed = 7\nscene.objects = cube, sphere\nscene.depth_range=0.4,0.6\nepochs = 3\n")
    pairs = read_config_file(path)
    cfg = config_from_pairs(SceneConfig, pairs, "scene.")
    assert cfg.seed == 7 and cfg.objects == ("cube", "sphere") and cfg.depth_range == (0.4, 0.6)
    with pytest.raises(ConfigurationError):
        config_from_pairs(SceneConfig, {"scene.colour": "red"}, "scene.")
    with pytest.raises(ConfigurationError):
        config_from_pairs(SceneConfig, {"scene.seed": "seven"}, "scene.")
    path.write_text("no equals sign\n")
    with pytest.raises(ConfigurationError):
        read_config_file(path)
