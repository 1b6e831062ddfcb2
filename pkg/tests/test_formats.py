import numpy as np
import pytest

from partfit import formats
from partfit.fit import FitConfig, FitResult
from partfit.geom import LabeledPointCloud
from partfit.model import BodyParams, builtin_humanoid
from partfit.seglab import RefineConfig
from partfit.synth import ScanRecipe, render_scan, sample_scene


def test_ply_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    cloud = LabeledPointCloud(rng.standard_normal((100, 3)),
                              rng.integers(0, 16, 100),
                              human_ids=rng.integers(0, 3, 100))
    p = tmp_path / "cloud.ply"
    formats.save_labeled_ply(p, cloud)
    loaded = formats.load_labeled_ply(p)
    assert np.array_equal(loaded.points, cloud.points)   # bit-identical
    assert np.array_equal(loaded.labels, cloud.labels)
    assert np.array_equal(loaded.human_ids, cloud.human_ids)
    # rewrite reproduces identical bytes
    p2 = tmp_path / "cloud2.ply"
    formats.save_labeled_ply(p2, loaded)
    assert p.read_bytes() == p2.read_bytes()


def test_ply_without_human_ids(tmp_path):
    cloud = LabeledPointCloud(np.zeros((3, 3)), np.array([1, 2, 3]))
    p = tmp_path / "c.ply"
    formats.save_labeled_ply(p, cloud)
    loaded = formats.load_labeled_ply(p)
    assert loaded.human_ids is None


def test_ply_rejects_garbage(tmp_path):
    p = tmp_path / "bad.ply"
    p.write_text("not a ply\n")
    with pytest.raises(ValueError):
        formats.load_labeled_ply(p)


def test_template_roundtrip(tmp_path):
    t = builtin_humanoid(0)
    p = tmp_path / "template.json"
    formats.save_template(p, t)
    t2 = formats.load_template(p)
    assert np.array_equal(t.rest_vertices, t2.rest_vertices)
    assert np.array_equal(t.faces, t2.faces)
    assert np.array_equal(t.skin_weights, t2.skin_weights)
    assert np.array_equal(t.joint_limits, t2.joint_limits)
    assert t.part_names == t2.part_names
    assert t2.num_parts == 15


def test_template_unknown_key_rejected(tmp_path):
    t = builtin_humanoid(0)
    p = tmp_path / "template.json"
    formats.save_template(p, t)
    doc = formats.load_json(p)
    doc["extra_field"] = 1
    formats.save_json(p, doc)
    with pytest.raises(ValueError, match="extra_field"):
        formats.load_template(p)


def test_config_dict_roundtrip_strict():
    cfg = FitConfig(huber_delta=0.03, max_steps=123)
    d = formats.config_to_dict(cfg)
    cfg2 = formats.config_from_dict(FitConfig, d)
    assert cfg2 == cfg
    d["not_a_field"] = 1
    with pytest.raises(ValueError, match="not_a_field"):
        formats.config_from_dict(FitConfig, d)


def test_recipe_roundtrip_with_tuples():
    recipe = ScanRecipe(camera_position=(1.0, 2.0, 3.0),
                        occluders=(((0, 0, 1), (0.1, 0.1, 0.1)),))
    d = formats.config_to_dict(recipe)
    r2 = formats.config_from_dict(ScanRecipe, d)
    assert r2.camera_position == (1.0, 2.0, 3.0)
    assert r2.occluders == (((0, 0, 1), (0.1, 0.1, 0.1)),)


def test_refine_config_roundtrip():
    rc = RefineConfig(n=7, weight_mode="softmax")
    assert formats.config_from_dict(
        RefineConfig, formats.config_to_dict(rc)) == rc


def test_digest_stable_and_sensitive():
    a = formats.digest({"x": 1.0, "y": [1, 2]})
    b = formats.digest({"y": [1, 2], "x": 1.0})
    c = formats.digest({"x": 1.0001, "y": [1, 2]})
    assert a == b
    assert a != c


def test_ground_truth_roundtrip(tmp_path):
    human = builtin_humanoid(0)
    recipe = ScanRecipe(seed=3, samples_per_m2=600.0, resolution=128)
    rng = np.random.default_rng(3)
    cloud, gt = render_scan(human, sample_scene(human, recipe, rng), recipe)
    p = tmp_path / "gt.json"
    formats.save_ground_truth(p, gt)
    gt2 = formats.load_ground_truth(p)
    assert np.array_equal(gt.labels, gt2.labels)
    assert np.array_equal(gt.human_ids, gt2.human_ids)
    assert np.array_equal(gt.vertices[0], gt2.vertices[0])
    assert np.array_equal(gt.joints[0], gt2.joints[0])
    assert np.array_equal(gt.params[0].theta, gt2.params[0].theta)
    nan_a = np.isnan(gt.part_centroids)
    assert np.array_equal(nan_a, np.isnan(gt2.part_centroids))
    assert np.array_equal(gt.part_centroids[~nan_a], gt2.part_centroids[~nan_a])


def test_fit_result_roundtrip(tmp_path):
    res = FitResult(
        params=BodyParams(np.zeros((16, 3)), np.array([0.1, -0.2]),
                          np.array([1.0, 2.0, 3.0])),
        final_loss=1.5, data_loss=1.0, pose_loss=0.8, shape_loss=0.2,
        steps_taken=42, wall_time=0.77, converged=True, init_used="test",
        points_used=500, normalized_loss=0.5,
    )
    p = tmp_path / "result.json"
    formats.save_fit_result(p, res, FitConfig(), variant=4, scan_name="s.ply")
    res2, doc = formats.load_fit_result(p)
    assert res2.final_loss == res.final_loss
    assert res2.steps_taken == 42
    assert res2.wall_time == 0.77          # from the timing sidecar
    assert res2.points_used == 500
    assert np.array_equal(res2.params.beta, res.params.beta)
    assert doc["variant"] == 4
    assert doc["config_digest"] == formats.digest(
        formats.config_to_dict(FitConfig()))


def test_fit_result_json_deterministic(tmp_path):
    res = FitResult(
        params=BodyParams(np.zeros((2, 3)), np.zeros(1), np.zeros(3)),
        final_loss=1.0, data_loss=1.0, pose_loss=0.0, shape_loss=0.0,
        steps_taken=1, wall_time=0.123, converged=False, init_used="x",
        points_used=10, normalized_loss=0.1,
    )
    a = tmp_path / "a.json"
    b = tmp_path / "b.json"
    formats.save_fit_result(a, res, FitConfig())
    import dataclasses
    res_other_time = dataclasses.replace(res, wall_time=9.9)
    formats.save_fit_result(b, res_other_time, FitConfig())
    # primary result identical even though wall time differs
    assert a.read_bytes() == b.read_bytes()


def test_obj_export(tmp_path):
    human = builtin_humanoid(0)
    p = tmp_path / "mesh.obj"
    formats.save_obj(p, human.rest_vertices, human.faces)
    text = p.read_text().splitlines()
    nv = sum(1 for line in text if line.startswith("v "))
    nf = sum(1 for line in text if line.startswith("f "))
    assert nv == human.num_vertices
    assert nf == len(human.faces)
