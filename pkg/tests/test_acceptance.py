"""Acceptance gate: every criterion prints one PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s`. The full suite performs
hundreds of fits on the 50-scan benchmark and takes tens of minutes
single-threaded.
"""

import subprocess
import sys
import time
from dataclasses import replace
import numpy as np
import pytest

from partfit import formats
from partfit.fit import FitConfig, fit, fit_sequence, run_variant, _pack, _value_and_grad
from partfit.geom import (axis_angle_to_matrix, build_index,
                          huber, kabsch, match_to_vertices)
from partfit.initreg import centroid_init_from_cloud
from partfit.metrics import (ablation_report, evaluate_fit,
                             evaluate_sequence, grid_search, seg_metrics, v2v)
from partfit.model import BodyParams, builtin_humanoid, canonicalize_theta, pose_forward, pose_mesh
from partfit.seglab import RefineConfig, filter_pseudo_labels, refine_labels
from partfit.synth import ScanRecipe, render_scan, render_sequence, sample_scene

from conftest import clean_recipe


def report(criterion, ok, detail):
    status = "PASS" if ok else "FAIL"
    print(f"\nCRITERION {criterion}: {status} — {detail}")
    assert ok, f"criterion {criterion}: {detail}"


# ---------------------------------------------------------------------------
# 1. Oracle equivalence
# ---------------------------------------------------------------------------

def test_criterion_1_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)

    nn_ok = True
    for trial in range(100):
        n = int(rng.integers(2, 2001))
        # mix continuous and quantized coordinates so exact ties occur
        pts = rng.standard_normal((n, 3))
        if trial % 3 == 0:
            pts = np.round(pts, 1)
        queries = pts[rng.integers(0, n, 5)] if trial % 4 == 0 \
            else rng.standard_normal((5, 3))
        k = int(rng.integers(1, min(n, 8) + 1))
        idx = build_index(pts)
        ii, dd = idx.query(queries, k=k)
        for r in range(len(queries)):
            d = np.linalg.norm(pts - queries[r], axis=1)
            oracle = np.lexsort((np.arange(n), d))[:k]
            if not np.array_equal(ii[r], oracle):
                nn_ok = False

    kabsch_ok = True
    for _ in range(100):
        s = rng.standard_normal((int(rng.integers(3, 40)), 3))
        if np.linalg.matrix_rank(s - s.mean(0)) < 2:
            continue
        R = axis_angle_to_matrix(rng.standard_normal(3))
        tr = rng.standard_normal(3)
        tf = kabsch(s, s @ R.T + tr)
        if np.max(np.abs(tf.rotation - R)) > 1e-9 or \
           np.max(np.abs(tf.translation - tr)) > 1e-9:
            kabsch_ok = False

    r = rng.uniform(0, 0.5, 10000)
    delta = 0.05
    closed = np.where(r <= delta, 0.5 * r * r, delta * (r - 0.5 * delta))
    huber_ok = bool(np.max(np.abs(huber(r, delta) - closed)) < 1e-12)

    dt = time.perf_counter() - t0
    report(1, nn_ok and kabsch_ok and huber_ok and dt < 10.0,
           f"nn={nn_ok} kabsch={kabsch_ok} huber={huber_ok} runtime={dt:.1f}s")


# ---------------------------------------------------------------------------
# 2. Gradient correctness
# ---------------------------------------------------------------------------

def test_criterion_2_gradient_correctness():
    template = builtin_humanoid(0)  # small template keeps 50 full
    # finite-difference gradients inside the time budget
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    small = replace(clean_recipe(), samples_per_m2=120.0, resolution=96)
    worst = 0.0
    for trial in range(50):
        recipe = replace(small, seed=trial)
        scene = sample_scene(template, recipe, np.random.default_rng([2, trial]))
        cloud, _ = render_scan(template, scene, recipe, seed=[2, trial])
        cfg = FitConfig(huber_delta=float(rng.uniform(0.01, 0.06)))
        theta = rng.uniform(-0.4, 0.4, (template.num_joints, 3))
        beta = rng.uniform(-0.6, 0.6, template.num_shapes)
        tr = scene[0].translation + rng.uniform(-0.15, 0.15, 3)
        x0 = _pack(theta, beta, tr)
        posed, _ = pose_forward(template, theta, beta, tr)
        matches = match_to_vertices(cloud, posed, template.vertex_part, True)
        _, g = _value_and_grad(cloud, template, x0, cfg, matches)
        h = 1e-5
        g_fd = np.zeros_like(g)
        for i in range(x0.size):
            xp = x0.copy(); xp[i] += h
            xm = x0.copy(); xm[i] -= h
            fp, _ = _value_and_grad(cloud, template, xp, cfg, matches)
            fm, _ = _value_and_grad(cloud, template, xm, cfg, matches)
            g_fd[i] = (fp - fm) / (2 * h)
        rel = np.linalg.norm(g - g_fd) / max(np.linalg.norm(g),
                                             np.linalg.norm(g_fd), 1e-12)
        worst = max(worst, rel)
    dt = time.perf_counter() - t0
    report(2, worst <= 1e-4 and dt < 60.0,
           f"worst relative gradient error {worst:.2e} over 50 configs, "
           f"runtime {dt:.1f}s")


# ---------------------------------------------------------------------------
# 3. End-to-end recovery on the clean subset
# ---------------------------------------------------------------------------

def test_criterion_3_end_to_end_recovery(template, clean_benchmark):
    t0 = time.perf_counter()
    cfg = FitConfig()
    v2vs, mpjpes, steps = [], [], []
    for cloud, gt in clean_benchmark:
        res = run_variant(cloud, template, cfg, 4)
        e_v, e_j = evaluate_fit(res, gt, template)
        v2vs.append(e_v)
        mpjpes.append(e_j)
        steps.append(res.steps_taken)
    dt = time.perf_counter() - t0
    mv, mj = float(np.mean(v2vs)), float(np.mean(mpjpes))
    ok = mv <= 25.0 and mj <= 25.0 and max(steps) <= 200 and dt < 600.0
    report(3, ok, f"mean V2V {mv:.1f} mm (<=25), mean MPJPE {mj:.1f} mm "
                  f"(<=25), max steps {max(steps)} (<=200), runtime {dt:.0f}s")


# ---------------------------------------------------------------------------
# 4. Ablation ordering
# ---------------------------------------------------------------------------

def test_criterion_4_ablation_ordering(template, benchmark, variant4_results):
    rep = ablation_report(benchmark, template, FitConfig(), variants=(1, 2, 3))
    v = {k: rep.per_variant[k]["v2v_mm"] for k in (1, 2, 3)}
    t = {k: rep.per_variant[k]["time_s"] for k in (1, 2, 3)}
    v[4] = float(np.mean([evaluate_fit(r, gt, template)[0]
                          for r, (_, gt) in zip(variant4_results, benchmark)]))
    t[4] = float(np.mean([r.wall_time for r in variant4_results]))

    def better(a, b):  # a at least 5% lower than b
        return a <= 0.95 * b

    checks = {
        "V2V(4)<=V2V(2)": better(v[4], v[2]),
        "V2V(2)<=V2V(1)": better(v[2], v[1]),
        "V2V(4)<V2V(3)": better(v[4], v[3]),
        "Time(3)<Time(4)": better(t[3], t[4]),
        "Time(4)<Time(1)": better(t[4], t[1]),
    }
    detail = (f"V2V mm 1:{v[1]:.1f} 2:{v[2]:.1f} 3:{v[3]:.1f} 4:{v[4]:.1f} | "
              f"Time s 1:{t[1]:.2f} 3:{t[3]:.2f} 4:{t[4]:.2f} | "
              + ", ".join(f"{k}={'ok' if b else 'VIOLATED'}"
                          for k, b in checks.items()))
    report(4, all(checks.values()), detail)


# ---------------------------------------------------------------------------
# 5. Segmentation refinement
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def refined_scores(template, benchmark, variant4_results):
    rc = RefineConfig()
    out = []
    for (cloud, gt), res in zip(benchmark, variant4_results):
        posed = pose_mesh(template, res.params)
        refined = refine_labels(cloud, posed, template.vertex_part, rc)
        s_in = seg_metrics(cloud.labels, gt.labels, template.num_parts)
        s_ref = seg_metrics(refined, gt.labels, template.num_parts)
        out.append((s_in, s_ref))
    return out


def test_criterion_5_segmentation_refinement(refined_scores):
    improved = sum(
        1 for s_in, s_ref in refined_scores
        if s_ref.accuracy > s_in.accuracy and s_ref.mean_iou > s_in.mean_iou
        and s_ref.mean_ap > s_in.mean_ap)
    n = len(refined_scores)
    gain = 100 * float(np.mean([s_ref.accuracy - s_in.accuracy
                                for s_in, s_ref in refined_scores]))
    ok = improved >= 0.9 * n and gain >= 5.0
    report(5, ok, f"improved Acc+mIoU+mAP on {improved}/{n} scans (>=90%), "
                  f"mean Acc gain {gain:+.1f} points (>=5)")


# ---------------------------------------------------------------------------
# 6. Pseudo-label filtering
# ---------------------------------------------------------------------------

def test_criterion_6_pseudo_label_filter(template, benchmark, variant4_results,
                                         refined_scores):
    kept, dropped = filter_pseudo_labels(variant4_results, 0.2)
    v2vs = np.array([evaluate_fit(r, gt, template)[0]
                     for r, (_, gt) in zip(variant4_results, benchmark)])
    accs = np.array([s_ref.accuracy for _, s_ref in refined_scores])
    ok = (len(dropped) == int(np.ceil(0.2 * len(benchmark)))
          and v2vs[kept].mean() <= v2vs.mean()
          and accs[kept].mean() >= accs.mean())
    report(6, ok, f"kept V2V {v2vs[kept].mean():.1f} <= full {v2vs.mean():.1f}; "
                  f"kept Acc {100*accs[kept].mean():.2f} >= "
                  f"full {100*accs.mean():.2f}; dropped {len(dropped)}")


# ---------------------------------------------------------------------------
# 7. Grid search
# ---------------------------------------------------------------------------

def test_criterion_7_grid_search(template, benchmark):
    rep = grid_search(benchmark, template, FitConfig())
    table = rep.v2v_table
    col0_worst = all(table[i, 0] > max(table[i, 1:]) for i in range(4))
    center = table[1, 1]  # (lambda_shape, lambda_pose) = (0.5, 0.5)
    ok_center = center <= 1.05 * table.min()
    rows = "; ".join(" ".join(f"{x:.1f}" for x in row) for row in table)
    report(7, col0_worst and ok_center,
           f"lambda_pose=0 column strictly worst per row: {col0_worst}; "
           f"(0.5,0.5)={center:.1f} vs min {table.min():.1f} "
           f"(within 5%: {ok_center}) | table rows: {rows}")


# ---------------------------------------------------------------------------
# 8. Video fitting
# ---------------------------------------------------------------------------

def test_criterion_8_video_fitting(template):
    recipe = replace(ScanRecipe(), seed=1234, occluder_count=0,
                     clutter_points=80)
    rng = np.random.default_rng(1234)
    start = sample_scene(template, recipe, rng)[0]
    drift = rng.uniform(-np.deg2rad(2.0), np.deg2rad(2.0), start.theta.shape)
    motion = []
    for f in range(30):
        theta = start.theta + f * drift
        if template.joint_limits is not None:
            theta = np.clip(theta, template.joint_limits[..., 0],
                            template.joint_limits[..., 1])
        motion.append([start.replace(theta=canonicalize_theta(theta))])
    frames = render_sequence(template, motion, recipe)
    clouds = [c for c, _ in frames]
    gts = [g for _, g in frames]
    cfg = FitConfig()
    seq, err_s = fit_sequence(clouds, template, cfg, mode="sequential")
    ind, err_i = fit_sequence(clouds, template, cfg, mode="individual")
    s_stats = evaluate_sequence(seq, gts, template)
    i_stats = evaluate_sequence(ind, gts, template)
    rel_v2v = abs(s_stats.v2v_mm - i_stats.v2v_mm) / max(s_stats.v2v_mm,
                                                         i_stats.v2v_mm)
    ok = (not err_s and not err_i
          and s_stats.steps <= i_stats.steps
          and s_stats.time_s <= i_stats.time_s
          and rel_v2v <= 0.15)
    report(8, ok, f"steps seq {s_stats.steps:.0f} <= ind {i_stats.steps:.0f}; "
                  f"time seq {s_stats.time_s:.2f}s <= ind {i_stats.time_s:.2f}s; "
                  f"V2V seq {s_stats.v2v_mm:.1f} vs ind {i_stats.v2v_mm:.1f} "
                  f"(rel diff {100*rel_v2v:.1f}% <= 15%)")


# ---------------------------------------------------------------------------
# 9. CLI determinism
# ---------------------------------------------------------------------------

def _run_cli(args):
    proc = subprocess.run([sys.executable, "-m", "partfit.cli"] + args,
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def test_criterion_9_cli_determinism(tmp_path, template):
    tpl = tmp_path / "template.json"
    formats.save_template(tpl, builtin_humanoid(0))
    recipe = replace(ScanRecipe(), seed=77, samples_per_m2=900.0,
                     resolution=128, pose_magnitude=0.25)
    rp = tmp_path / "recipe.json"
    formats.save_json(rp, formats.config_to_dict(recipe))
    cfgp = tmp_path / "fit.json"
    formats.save_json(cfgp, formats.config_to_dict(FitConfig(max_steps=40)))

    trees = []
    for run in ("a", "b"):
        d = tmp_path / run
        d.mkdir()
        _run_cli(["gen", "--recipe", str(rp), "--count", "2",
                  "--out", str(d / "scans"), "--template", str(tpl)])
        _run_cli(["fit", str(d / "scans/scan_0000.ply"), "--template",
                  str(tpl), "--config", str(cfgp),
                  "--out", str(d / "result_0000.json")])
        _run_cli(["refine", str(d / "scans/scan_0000.ply"),
                  str(d / "result_0000.json"), "--template", str(tpl),
                  "--out", str(d / "refined_0000.ply")])
        results = d / "results"
        results.mkdir()
        for i in range(2):
            _run_cli(["fit", str(d / f"scans/scan_{i:04d}.ply"),
                      "--template", str(tpl), "--config", str(cfgp),
                      "--out", str(results / f"result_{i:04d}.json")])
        _run_cli(["eval", "--scan-dir", str(d / "scans"),
                  "--results-dir", str(results), "--template", str(tpl),
                  "--out", str(d / "report")])
        tree = {}
        for p in sorted(d.rglob("*")):
            if p.is_file() and not p.name.endswith(".timing.json"):
                tree[str(p.relative_to(d))] = p.read_bytes()
        trees.append(tree)

    same_names = set(trees[0]) == set(trees[1])
    diffs = [k for k in trees[0] if same_names and trees[0][k] != trees[1][k]]
    ok = same_names and not diffs
    report(9, ok, f"{len(trees[0])} files byte-identical across reruns"
                  + ("" if ok else f"; differing: {diffs}"))


# ---------------------------------------------------------------------------
# 10. Invariant suites
# ---------------------------------------------------------------------------

def test_criterion_10_invariant_suites(template):
    """Compact re-run of the >=100-case randomized invariants; the full
    per-module property suites live in the module test files."""
    rng = np.random.default_rng(10)
    failures = []

    # geom: kabsch rigid-motion invariance (100 cases)
    from partfit.geom import RigidTransform
    for _ in range(100):
        s = rng.standard_normal((8, 3))
        tgt = rng.standard_normal((8, 3))
        base = kabsch(s, tgt)
        R = axis_angle_to_matrix(rng.standard_normal(3))
        tr = rng.standard_normal(3)
        moved = kabsch(s @ R.T + tr, tgt @ R.T + tr)
        M = RigidTransform(R, tr)
        expect = M.compose(base).compose(M.inverse())
        if np.max(np.abs(moved.rotation - expect.rotation)) > 1e-8:
            failures.append("kabsch-equivariance")
            break

    # geom: huber convex/monotone on random grids (100 cases)
    for _ in range(100):
        delta = float(rng.uniform(0.005, 0.2))
        r = np.sort(rng.uniform(0, 0.5, 200))
        vals = huber(r, delta)
        if np.any(np.diff(vals) < -1e-15):
            failures.append("huber-monotone")
            break

    # model: rigid equivariance of posing (100 cases)
    from partfit.geom import matrix_to_axis_angle
    small = builtin_humanoid(0)
    root = small.rest_joints[0]
    for _ in range(100):
        theta = rng.uniform(-0.4, 0.4, (16, 3))
        beta = rng.uniform(-0.5, 0.5, 2)
        base = pose_mesh(small, BodyParams(theta, beta, np.zeros(3)))
        R = axis_angle_to_matrix(rng.uniform(-1, 1, 3))
        tr = rng.standard_normal(3)
        theta2 = theta.copy()
        theta2[0] = matrix_to_axis_angle(R @ axis_angle_to_matrix(theta[0]))
        posed = pose_mesh(small, BodyParams(theta2, beta, tr))
        if np.max(np.abs(posed - ((base - root) @ R.T + root + tr))) > 1e-8:
            failures.append("pose-equivariance")
            break

    # eval: metric symmetry/invariance (100 cases)
    for _ in range(100):
        a = rng.standard_normal((30, 3))
        b = rng.standard_normal((30, 3))
        R = axis_angle_to_matrix(rng.standard_normal(3))
        tr = rng.standard_normal(3)
        if abs(v2v(a, b) - v2v(b, a)) > 1e-9 or \
           abs(v2v(a @ R.T + tr, b @ R.T + tr) - v2v(a, b)) > 1e-6:
            failures.append("v2v-invariance")
            break

    # seg metrics permutation invariance (100 cases)
    gt = rng.integers(0, 16, 400)
    pred = rng.integers(0, 16, 400)
    s0 = seg_metrics(pred, gt, 15)
    for _ in range(100):
        perm = rng.permutation(400)
        s = seg_metrics(pred[perm], gt[perm], 15)
        if s.accuracy != s0.accuracy or s.mean_iou != s0.mean_iou:
            failures.append("seg-permutation")
            break

    # fit: bitwise determinism of a short fit
    recipe = replace(clean_recipe(), seed=3, samples_per_m2=900.0)
    scene = sample_scene(template, recipe, np.random.default_rng(3))
    cloud, _ = render_scan(template, scene, recipe, seed=3)
    cfg = FitConfig(max_steps=25)
    init = centroid_init_from_cloud(cloud, template)
    ra = fit(cloud, template, cfg, init)
    rb = fit(cloud, template, cfg, init)
    if not (np.array_equal(ra.params.theta, rb.params.theta)
            and ra.final_loss == rb.final_loss
            and ra.steps_taken == rb.steps_taken):
        failures.append("fit-determinism")

    # synth: generator label self-consistency (spot check)
    scores = None
    cloud2, gt2 = render_scan(template, scene, recipe, seed=4)
    scores = seg_metrics(gt2.labels, gt2.labels, template.num_parts)
    if scores.accuracy != 1.0:
        failures.append("gt-self-consistency")

    report(10, not failures,
           "module invariant re-checks all green" if not failures
           else f"failing invariants: {failures}")
