import numpy as np
import pytest

from partfit.fit import (FitConfig, FitResult, fit, fit_sequence, gradient,
                         objective, run_variant, _pack, _value_and_grad)
from partfit.geom import LabeledPointCloud, match_to_vertices
from partfit.initreg import centroid_init_from_cloud
from partfit.model import BodyParams, builtin_humanoid, pose_forward, pose_mesh
from partfit.synth import ScanRecipe, render_scan, render_sequence, sample_scene


@pytest.fixture(scope="module")
def human():
    return builtin_humanoid(0)


CLEAN = dict(occluder_count=0, clutter_points=0, uniform_flip=0.0,
             lr_swap=0.0, clutter_leak=0.0, samples_per_m2=1500.0)


def make_scan(human, seed=0, **kw):
    recipe = ScanRecipe(seed=seed, **{**CLEAN, **kw})
    rng = np.random.default_rng(seed)
    scene = sample_scene(human, recipe, rng)
    return render_scan(human, scene, recipe)


def surface_cloud(human, params, n=400, seed=0):
    """Points sampled exactly on the posed mesh with true part labels."""
    rng = np.random.default_rng(seed)
    posed = pose_mesh(human, params)
    a = posed[human.faces[:, 0]]
    b = posed[human.faces[:, 1]]
    c = posed[human.faces[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    fidx = rng.choice(len(human.faces), size=n, p=areas / areas.sum())
    uv = rng.random((n, 2))
    flip = uv.sum(axis=1) > 1
    uv[flip] = 1 - uv[flip]
    pts = a[fidx] + uv[:, :1] * (b[fidx] - a[fidx]) + uv[:, 1:] * (c[fidx] - a[fidx])
    return LabeledPointCloud(pts, human.face_parts()[fidx])


# ---------------------------------------------------------------------------
# config validation
# ---------------------------------------------------------------------------

def test_config_defaults_match_contract():
    cfg = FitConfig()
    assert (cfg.lambda_data, cfg.lambda_pose, cfg.lambda_shape) == (1.0, 0.5, 0.5)
    assert cfg.max_steps == 200


def test_config_validation():
    with pytest.raises(ValueError):
        FitConfig(lambda_pose=-0.1)
    with pytest.raises(ValueError):
        FitConfig(max_steps=0)
    with pytest.raises(ValueError):
        FitConfig(learning_rate=0.0)


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------

def test_objective_zero_at_perfect_surface_fit(human):
    params = BodyParams.identity(human)
    # cloud points exactly on mesh vertices of the rest pose
    cloud = LabeledPointCloud(human.rest_vertices.copy(),
                              human.vertex_part.copy())
    total, data, pose, shape = objective(cloud, human, params, FitConfig())
    assert (total, data, pose, shape) == (0.0, 0.0, 0.0, 0.0)


def test_objective_weight_zeroing(human):
    params = BodyParams(np.random.default_rng(0).uniform(-0.2, 0.2, (16, 3)),
                        np.array([0.3, -0.2]), np.zeros(3))
    cloud = surface_cloud(human, BodyParams.identity(human))
    cfg = FitConfig(lambda_pose=0.0, lambda_shape=0.0)
    total, data, pose, shape = objective(cloud, human, params, cfg)
    assert total == pytest.approx(data, rel=1e-12)


def test_objective_joint_perturbation_closed_form(human):
    cfg = FitConfig()
    truth = BodyParams.identity(human)
    cloud = surface_cloud(human, truth, n=800)
    base_total, base_data, base_pose, _ = objective(cloud, human, truth, cfg)
    assert base_pose == 0.0

    theta = truth.theta.copy()
    theta[5] = [0.0, 0.1, 0.0]  # bend a non-root joint (left elbow swing)
    perturbed = BodyParams(theta, truth.beta, truth.translation)
    total, data, pose, _ = objective(cloud, human, perturbed, cfg)
    assert pose == pytest.approx(0.01, abs=1e-12)
    assert total - data == pytest.approx(cfg.lambda_pose * 0.01, abs=1e-12)
    assert data > base_data


def test_objective_point_permutation_invariant(human):
    rng = np.random.default_rng(1)
    cloud = surface_cloud(human, BodyParams.identity(human), n=300)
    params = BodyParams(rng.uniform(-0.1, 0.1, (16, 3)), np.zeros(2), np.zeros(3))
    cfg = FitConfig()
    base = objective(cloud, human, params, cfg)[0]
    for _ in range(20):
        perm = rng.permutation(len(cloud))
        shuffled = LabeledPointCloud(cloud.points[perm], cloud.labels[perm])
        assert objective(shuffled, human, params, cfg)[0] == \
            pytest.approx(base, rel=1e-12)


# ---------------------------------------------------------------------------
# gradient
# ---------------------------------------------------------------------------

def test_gradient_shape_term_closed_form(human):
    cfg = FitConfig(lambda_data=0.0, lambda_pose=0.0, lambda_shape=0.7)
    beta = np.array([0.4, -1.2])
    params = BodyParams(np.zeros((16, 3)), beta, np.zeros(3))
    cloud = surface_cloud(human, BodyParams.identity(human), n=50)
    _, g_beta, _ = gradient(cloud, human, params, cfg)
    assert np.allclose(g_beta, 2 * 0.7 * beta, atol=1e-12)


def test_gradient_near_zero_at_perfect_fit(human):
    params = BodyParams.identity(human)
    cloud = LabeledPointCloud(human.rest_vertices.copy(), human.vertex_part.copy())
    g_theta, g_beta, g_t = gradient(cloud, human, params, FitConfig())
    assert np.linalg.norm(np.concatenate([g_theta.ravel(), g_beta, g_t])) < 1e-6


def test_gradient_matches_finite_differences(human):
    rng = np.random.default_rng(2)
    cloud = make_scan(human, seed=3)[0]
    cfg = FitConfig()
    theta = rng.uniform(-0.3, 0.3, (16, 3))
    beta = rng.uniform(-0.4, 0.4, 2)
    t = rng.uniform(-0.2, 0.2, 3)
    x0 = _pack(theta, beta, t)
    posed, _ = pose_forward(human, theta, beta, t)
    matches = match_to_vertices(cloud, posed, human.vertex_part, True)
    _, g = _value_and_grad(cloud, human, x0, cfg, matches)
    h = 1e-5
    for i in rng.choice(x0.size, 20, replace=False):
        xp = x0.copy(); xp[i] += h
        xm = x0.copy(); xm[i] -= h
        fp, _ = _value_and_grad(cloud, human, xp, cfg, matches)
        fm, _ = _value_and_grad(cloud, human, xm, cfg, matches)
        fd = (fp - fm) / (2 * h)
        assert abs(g[i] - fd) <= 1e-4 * max(abs(g[i]), abs(fd), 1e-8)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def test_fit_from_ground_truth_stays(human):
    cloud, gt = make_scan(human, seed=4)
    cfg = FitConfig()
    res = fit(cloud, human, cfg, gt.params[0])
    total0 = objective(cloud, human, gt.params[0], cfg)[0]
    assert res.final_loss <= total0 + 1e-12
    assert res.converged
    assert res.steps_taken <= cfg.max_steps


def test_fit_best_so_far_contract(human):
    cloud, gt = make_scan(human, seed=5)
    cfg = FitConfig(max_steps=30)
    init = centroid_init_from_cloud(cloud, human)
    init_loss = objective(cloud, human, init, cfg)[0]
    res = fit(cloud, human, cfg, init)
    assert res.final_loss <= init_loss + 1e-12


def test_fit_steps_capped(human):
    cloud, _ = make_scan(human, seed=6)
    cfg = FitConfig(max_steps=17, min_relative_improvement=0.0)
    init = centroid_init_from_cloud(cloud, human)
    res = fit(cloud, human, cfg, init)
    assert res.steps_taken <= 17


def test_fit_deterministic(human):
    cloud, _ = make_scan(human, seed=7)
    cfg = FitConfig(max_steps=40)
    init = centroid_init_from_cloud(cloud, human)
    a = fit(cloud, human, cfg, init)
    b = fit(cloud, human, cfg, init)
    assert np.array_equal(a.params.theta, b.params.theta)
    assert np.array_equal(a.params.beta, b.params.beta)
    assert np.array_equal(a.params.translation, b.params.translation)
    assert a.final_loss == b.final_loss
    assert a.steps_taken == b.steps_taken
    assert a.converged == b.converged


def test_fit_recovers_pose_end_to_end(human):
    cloud, gt = make_scan(human, seed=8, samples_per_m2=4000.0)
    res = run_variant(cloud, human, FitConfig(), 4)
    init = centroid_init_from_cloud(cloud, human)
    from partfit.metrics import v2v
    v_init = v2v(pose_mesh(human, init), gt.vertices[0])
    v_fit = v2v(pose_mesh(human, res.params), gt.vertices[0])
    assert v_fit < v_init


def test_lambda_scaling_invariance(human):
    # Scaling every lambda by c scales the loss exactly and leaves the
    # Adam trajectory unchanged: the update normalizes gradient scale, up
    # to the eps=1e-8 stabilizer, whose effect is orders below 1e-9 while
    # gradients are large (dense cloud, early steps) and no step lands on
    # a nearest-vertex assignment boundary.
    cloud, _ = make_scan(human, seed=11, samples_per_m2=12000.0)
    init = centroid_init_from_cloud(cloud, human)
    c = 2.0
    cfg1 = FitConfig(max_steps=10, min_relative_improvement=0.0,
                     learning_rate=0.01,
                     lambda_data=16.0, lambda_pose=8.0, lambda_shape=8.0)
    cfg2 = FitConfig(max_steps=10, min_relative_improvement=0.0,
                     learning_rate=0.01,
                     lambda_data=cfg1.lambda_data * c,
                     lambda_pose=cfg1.lambda_pose * c,
                     lambda_shape=cfg1.lambda_shape * c)
    t1 = objective(cloud, human, init, cfg1)[0]
    t2 = objective(cloud, human, init, cfg2)[0]
    assert t2 == pytest.approx(c * t1, rel=1e-12)
    r1 = fit(cloud, human, cfg1, init)
    r2 = fit(cloud, human, cfg2, init)
    assert r2.final_loss == pytest.approx(c * r1.final_loss, rel=1e-9)
    x1 = _pack(r1.params.theta, r1.params.beta, r1.params.translation)
    x2 = _pack(r2.params.theta, r2.params.beta, r2.params.translation)
    assert np.max(np.abs(x1 - x2)) < 1e-9


def test_optimize_off_returns_init(human):
    cloud, _ = make_scan(human, seed=10)
    cfg = FitConfig(optimize=False)
    init = centroid_init_from_cloud(cloud, human)
    res = fit(cloud, human, cfg, init)
    assert res.steps_taken == 0
    assert np.array_equal(res.params.theta, init.theta)


def test_fit_nonfinite_aborts_with_step_index(human):
    from partfit.optim import NumericFailureError
    cloud, _ = make_scan(human, seed=15)
    init = centroid_init_from_cloud(cloud, human)
    cfg = FitConfig(learning_rate=1e300, max_steps=10)
    with pytest.raises(NumericFailureError) as exc:
        fit(cloud, human, cfg, init)
    assert exc.value.step >= 1
    assert "step" in str(exc.value)


def test_fit_result_validation():
    params = BodyParams(np.zeros((1, 3)), np.zeros(0), np.zeros(3))
    with pytest.raises(ValueError):
        FitResult(params=params, final_loss=1.0, data_loss=-1.0, pose_loss=0,
                  shape_loss=0, steps_taken=1, wall_time=0.1, converged=True,
                  init_used="x")


# ---------------------------------------------------------------------------
# variants
# ---------------------------------------------------------------------------

def test_variant_1_runs_four_fits(human, monkeypatch):
    cloud, _ = make_scan(human, seed=11)
    calls = []
    import partfit.fit as fitmod
    real_fit = fitmod.fit

    def counting_fit(*args, **kwargs):
        calls.append(kwargs.get("init_used"))
        return real_fit(*args, **kwargs)

    monkeypatch.setattr(fitmod, "fit", counting_fit)
    cfg = FitConfig(max_steps=5)
    fitmod.run_variant(cloud, human, cfg, 1)
    assert calls == [f"multi_start[{i}]" for i in range(4)]


def test_variant_3_no_optimization(human):
    cloud, _ = make_scan(human, seed=12)
    res = run_variant(cloud, human, FitConfig(), 3)
    assert res.steps_taken == 0
    assert res.init_used == "centroid_init"


def test_variant_3_faster_than_4(human):
    cloud, _ = make_scan(human, seed=13)
    cfg = FitConfig()
    r3 = run_variant(cloud, human, cfg, 3)
    r4 = run_variant(cloud, human, cfg, 4)
    assert r3.wall_time < r4.wall_time


def test_variant_validation(human):
    cloud, _ = make_scan(human, seed=14)
    with pytest.raises(ValueError):
        run_variant(cloud, human, FitConfig(), 5)


def test_multi_start_finds_back_facing_scan(human):
    # body rotated half a turn relative to the camera side; the feet (the
    # front-back cue) face the sensor, so the 180-degree seed should win
    recipe = ScanRecipe(seed=20, **{**CLEAN, "yaw_range": 0.0,
                                    "translation_jitter": 0.0,
                                    "pose_magnitude": 0.0,
                                    "samples_per_m2": 1200.0,
                                    "camera_position": (0.0, -2.8, 1.5)})
    rng = np.random.default_rng(20)
    scene = sample_scene(human, recipe, rng)
    theta = scene[0].theta.copy()
    theta[0] = [0.0, 0.0, np.pi]
    flipped = [scene[0].replace(theta=theta)]
    cloud, gt = render_scan(human, flipped, recipe)
    cfg = FitConfig(max_steps=60)
    res = run_variant(cloud, human, cfg, 1)
    assert res.init_used == "multi_start[2]"


# ---------------------------------------------------------------------------
# sequences
# ---------------------------------------------------------------------------

def _tiny_motion(human, frames=3):
    recipe = ScanRecipe(seed=30, **{**CLEAN, "samples_per_m2": 1200.0,
                                    "pose_magnitude": 0.2})
    rng = np.random.default_rng(30)
    start = sample_scene(human, recipe, rng)[0]
    drift = np.deg2rad(1.5)
    motion = []
    for f in range(frames):
        theta = start.theta + f * drift * 0.5
        from partfit.model import canonicalize_theta
        motion.append([start.replace(theta=canonicalize_theta(theta))])
    return render_sequence(human, motion, recipe)


def test_sequence_single_frame_modes_identical(human):
    frames = _tiny_motion(human, frames=1)
    clouds = [c for c, _ in frames]
    cfg = FitConfig(max_steps=40)
    seq, err1 = fit_sequence(clouds, human, cfg, mode="sequential")
    ind, err2 = fit_sequence(clouds, human, cfg, mode="individual")
    assert not err1 and not err2
    assert np.array_equal(seq[0].params.theta, ind[0].params.theta)
    assert seq[0].final_loss == ind[0].final_loss


def test_sequence_warm_start_saves_steps(human):
    frames = _tiny_motion(human, frames=4)
    clouds = [c for c, _ in frames]
    cfg = FitConfig()
    seq, _ = fit_sequence(clouds, human, cfg, mode="sequential")
    ind, _ = fit_sequence(clouds, human, cfg, mode="individual")
    assert np.mean([r.steps_taken for r in seq]) <= \
        np.mean([r.steps_taken for r in ind])


def test_sequence_mode_validation(human):
    with pytest.raises(ValueError):
        fit_sequence([], human, FitConfig(), mode="sequential")
    cloud, _ = make_scan(human, seed=31)
    with pytest.raises(ValueError):
        fit_sequence([cloud], human, FitConfig(), mode="batch")
