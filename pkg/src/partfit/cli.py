"""Command-line entry points tying the pipeline together.

Exit codes: 0 success, 2 input/config error, 3 degenerate-geometry error,
4 numeric failure. All randomness flows from the recipe seed (or the
--seed override), which is recorded in every manifest.
"""

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import formats, metrics, seglab
from .fit import FitConfig, fit_sequence, run_variant
from .geom import LabeledPointCloud
from .initreg import DegenerateInitError
from .model import (DEFAULT_TEMPLATE_SUBDIVISION, builtin_humanoid,
                    canonicalize_theta, pose_mesh)
from .optim import NumericFailureError
from .seglab import RefineConfig, filter_pseudo_labels
from .synth import ScanRecipe, render_scan, render_sequence, sample_scene

TEMPLATE_ENV = "PARTFIT_TEMPLATE"


def _resolve_template(arg):
    if arg is None:
        arg = os.environ.get(TEMPLATE_ENV, "builtin")
    if arg == "builtin":
        return builtin_humanoid(DEFAULT_TEMPLATE_SUBDIVISION)
    if arg.startswith("builtin:"):
        return builtin_humanoid(int(arg.split(":", 1)[1]))
    path = Path(arg)
    if not path.exists():
        raise FileNotFoundError(f"template file not found: {path}")
    return formats.load_template(path)


def _load_fit_config(arg):
    if arg is None:
        return FitConfig()
    return formats.load_config(arg, FitConfig)


def _load_scan_pairs(scan_dir, prefix="scan"):
    """Ordered (cloud, gt) pairs from a generated directory."""
    scan_dir = Path(scan_dir)
    plys = sorted(scan_dir.glob(f"{prefix}_*.ply"))
    if not plys:
        raise FileNotFoundError(f"no {prefix}_*.ply files in {scan_dir}")
    pairs = []
    for ply in plys:
        gt_path = ply.parent / (ply.stem + ".gt.json")
        if not gt_path.exists():
            raise FileNotFoundError(f"missing ground truth for {ply.name}")
        pairs.append((formats.load_labeled_ply(ply),
                      formats.load_ground_truth(gt_path)))
    return pairs, plys


def _gen_one(task):
    template, recipe, index, out_dir = task
    rng = np.random.default_rng([recipe.seed, index, 5])
    params = sample_scene(template, recipe, rng)
    cloud, gt = render_scan(template, params, recipe, seed=[recipe.seed, index])
    formats.save_labeled_ply(Path(out_dir) / f"scan_{index:04d}.ply", cloud)
    formats.save_ground_truth(Path(out_dir) / f"scan_{index:04d}.gt.json", gt)
    return index


def cmd_gen(args):
    recipe = (formats.load_config(args.recipe, ScanRecipe)
              if args.recipe else ScanRecipe())
    if args.seed is not None:
        recipe = replace(recipe, seed=args.seed)
    template = _resolve_template(args.template)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    entries = []
    if args.sequence:
        motion = _slow_motion(template, recipe, args.count)
        for i, (cloud, gt) in enumerate(render_sequence(template, motion, recipe)):
            formats.save_labeled_ply(out / f"frame_{i:04d}.ply", cloud)
            formats.save_ground_truth(out / f"frame_{i:04d}.gt.json", gt)
            entries.append({"index": i, "scan": f"frame_{i:04d}.ply",
                            "gt": f"frame_{i:04d}.gt.json"})
    else:
        tasks = [(template, recipe, i, str(out)) for i in range(args.count)]
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                list(pool.map(_gen_one, tasks))
        else:
            for task in tasks:
                _gen_one(task)
        entries = [{"index": i, "scan": f"scan_{i:04d}.ply",
                    "gt": f"scan_{i:04d}.gt.json"} for i in range(args.count)]

    manifest = {
        "format_version": formats.FORMAT_VERSION,
        "seed": recipe.seed,
        "count": args.count,
        "sequence": bool(args.sequence),
        "recipe": formats.config_to_dict(recipe),
        "recipe_digest": formats.digest(formats.config_to_dict(recipe)),
        "entries": entries,
    }
    formats.save_json(out / "manifest.json", manifest)
    print(f"wrote {len(entries)} scans to {out}")
    return 0


def _slow_motion(template, recipe, frames):
    """Linear joint-space drift of at most ~2 degrees per joint per frame."""
    rng = np.random.default_rng([recipe.seed, 7])
    start = sample_scene(template, recipe, rng)
    rate = np.deg2rad(2.0)
    drifts = [rng.uniform(-rate, rate, p.theta.shape) for p in start]
    t_drifts = [rng.uniform(-0.01, 0.01, 3) for _ in start]
    motion = []
    for f in range(frames):
        frame_params = []
        for p, d, td in zip(start, drifts, t_drifts):
            theta = p.theta + f * d
            if template.joint_limits is not None:
                theta = np.clip(theta, template.joint_limits[..., 0],
                                template.joint_limits[..., 1])
            frame_params.append(p.replace(theta=canonicalize_theta(theta),
                                          translation=p.translation + f * td))
        motion.append(frame_params)
    return motion


def _select_human(cloud, human):
    if cloud.human_ids is None:
        raise ValueError("--human given but the scan has no human_id field")
    mask = cloud.human_ids == human
    if not mask.any():
        raise ValueError(f"no points with human_id {human}")
    return LabeledPointCloud(cloud.points[mask], cloud.labels[mask],
                             human_ids=cloud.human_ids[mask])


def cmd_fit(args):
    template = _resolve_template(args.template)
    config = _load_fit_config(args.config)
    cloud = formats.load_labeled_ply(args.scan)
    if args.human is not None:
        cloud = _select_human(cloud, args.human)
    result = run_variant(cloud, template, config, args.variant)
    out = Path(args.out) if args.out else Path(str(args.scan) + ".result.json")
    formats.save_fit_result(out, result, config, variant=args.variant,
                            scan_name=Path(args.scan).name)
    if args.mesh_out:
        formats.save_obj(args.mesh_out, pose_mesh(template, result.params),
                         template.faces)
    print(f"variant {args.variant}: loss {result.final_loss:.6f} "
          f"steps {result.steps_taken} converged {result.converged}")
    return 0


def cmd_refine(args):
    template = _resolve_template(args.template)
    config = (formats.load_config(args.config, RefineConfig)
              if args.config else RefineConfig())
    cloud = formats.load_labeled_ply(args.scan)
    result, _ = formats.load_fit_result(args.result)
    posed = pose_mesh(template, result.params)
    labels = seglab.refine_labels(cloud, posed, template.vertex_part, config)
    refined = LabeledPointCloud(cloud.points, labels, human_ids=cloud.human_ids)
    formats.save_labeled_ply(args.out, refined)
    print(f"wrote refined labels to {args.out}")
    return 0


def cmd_eval(args):
    template = _resolve_template(args.template)
    pairs, plys = _load_scan_pairs(args.scan_dir, prefix=args.prefix)
    results_dir = Path(args.results_dir)
    refined_dir = Path(args.refined_dir) if args.refined_dir else None

    rows = []
    per_scan = []
    for i, ((cloud, gt), ply) in enumerate(zip(pairs, plys)):
        rpath = results_dir / f"result_{i:04d}.json"
        if not rpath.exists():
            raise FileNotFoundError(f"missing fit result {rpath}")
        result, _ = formats.load_fit_result(rpath)
        e_v, e_j = metrics.evaluate_fit(result, gt, template)
        entry = {"index": i, "v2v_mm": e_v, "mpjpe_mm": e_j,
                 "final_loss": result.final_loss}
        input_scores = metrics.seg_metrics(cloud.labels, gt.labels,
                                           template.num_parts)
        entry["input_seg"] = input_scores.to_dict()
        if refined_dir is not None:
            refined = formats.load_labeled_ply(refined_dir / f"refined_{i:04d}.ply")
            scores = metrics.seg_metrics(refined.labels, gt.labels,
                                         template.num_parts)
            entry["refined_seg"] = scores.to_dict()
        per_scan.append(entry)
        row = [i, f"{e_v:.1f}", f"{e_j:.1f}"]
        row.append(f"{100 * input_scores.accuracy:.2f}")
        if refined_dir is not None:
            row.append(f"{100 * scores.accuracy:.2f}")
        rows.append(row)

    summary = {
        "v2v_mm": float(np.mean([e["v2v_mm"] for e in per_scan])),
        "mpjpe_mm": float(np.mean([e["mpjpe_mm"] for e in per_scan])),
        "input_acc": float(np.mean([e["input_seg"]["accuracy"]
                                    for e in per_scan])),
    }
    headers = ["scan", "V2V", "MPJPE", "inAcc%"]
    if refined_dir is not None:
        headers.append("refAcc%")
        summary["refined_acc"] = float(np.mean([e["refined_seg"]["accuracy"]
                                                for e in per_scan]))
    text = metrics.render_table(headers, rows, title="Per-scan evaluation")
    text += (f"\nmean V2V {summary['v2v_mm']:.1f} mm, "
             f"mean MPJPE {summary['mpjpe_mm']:.1f} mm\n")
    text += metrics.MAP_DEFINITION + "\n"
    print(text)
    if args.out:
        Path(str(args.out) + ".txt").write_text(text)
        formats.save_json(str(args.out) + ".json",
                          {"per_scan": per_scan, "summary": summary,
                           "map_definition": metrics.MAP_DEFINITION})
    return 0


def cmd_ablate(args):
    template = _resolve_template(args.template)
    config = _load_fit_config(args.config)
    pairs, _ = _load_scan_pairs(args.scan_dir)
    report = metrics.ablation_report(pairs, template, config, jobs=args.jobs)
    text = report.render_text()
    print(text)
    if args.out:
        Path(str(args.out) + ".txt").write_text(text)
        formats.save_json(str(args.out) + ".json", report.to_dict())
    return 0


def cmd_grid(args):
    template = _resolve_template(args.template)
    config = _load_fit_config(args.config)
    pairs, _ = _load_scan_pairs(args.scan_dir)
    report = metrics.grid_search(pairs, template, config, jobs=args.jobs)
    text = report.render_text()
    print(text)
    if args.out:
        Path(str(args.out) + ".txt").write_text(text)
        formats.save_json(str(args.out) + ".json", report.to_dict())
    return 0


def cmd_video(args):
    template = _resolve_template(args.template)
    config = _load_fit_config(args.config)
    pairs, _ = _load_scan_pairs(args.scan_dir, prefix="frame")
    frames = [cloud for cloud, _ in pairs]
    gts = [gt for _, gt in pairs]
    human_count = len(gts[0].params)

    seq_results, _ = fit_sequence(frames, template, config, mode="sequential")
    ind_results, _ = fit_sequence(frames, template, config, mode="individual")
    seq = metrics.VideoSequenceResult(
        name=Path(args.scan_dir).name, human_count=human_count,
        modes={
            "sequential": metrics.evaluate_sequence(seq_results, gts, template),
            "individual": metrics.evaluate_sequence(ind_results, gts, template),
        })
    report = metrics.video_report([seq])
    text = report.render_text()
    print(text)
    if args.out:
        Path(str(args.out) + ".txt").write_text(text)
        formats.save_json(str(args.out) + ".json", report.to_dict())
    return 0


def cmd_export_pseudo(args):
    pairs, plys = _load_scan_pairs(args.scan_dir)
    results_dir = Path(args.results_dir)
    refined_dir = Path(args.refined_dir)
    results = []
    refined_labels = []
    digest = ""
    for i in range(len(pairs)):
        res, doc = formats.load_fit_result(results_dir / f"result_{i:04d}.json")
        results.append(res)
        digest = doc.get("config_digest", "")
        refined = formats.load_labeled_ply(refined_dir / f"refined_{i:04d}.ply")
        refined_labels.append(refined.labels)
    kept, dropped = filter_pseudo_labels(results, args.drop_fraction)
    clouds = [cloud for cloud, _ in pairs]
    manifest = seglab.export_pseudo_dataset(
        clouds, refined_labels, kept, args.out,
        losses=[r.final_loss for r in results], config_digest=digest,
        sources=[p.name for p in plys],
    )
    print(f"kept {len(kept)} scans, dropped {len(dropped)}; manifest {manifest}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="partfit",
        description="Fit an articulated humanoid to labeled point clouds "
                    "and refine per-point part labels.",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate synthetic labeled scans")
    g.add_argument("--recipe", help="ScanRecipe JSON (defaults used if omitted)")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, help="override the recipe seed")
    g.add_argument("--template", help="template JSON or 'builtin'")
    g.add_argument("--sequence", action="store_true",
                   help="render a slow-motion frame sequence instead of scans")
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("fit", help="fit the body model to one scan")
    f.add_argument("scan")
    f.add_argument("--template")
    f.add_argument("--config", help="FitConfig JSON")
    f.add_argument("--variant", type=int, default=4, choices=(1, 2, 3, 4))
    f.add_argument("--out")
    f.add_argument("--mesh-out")
    f.add_argument("--human", type=int)
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("refine", help="refine scan labels from a fitted mesh")
    r.add_argument("scan")
    r.add_argument("result")
    r.add_argument("--template")
    r.add_argument("--config", help="RefineConfig JSON")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_refine)

    e = sub.add_parser("eval", help="evaluate fit results against ground truth")
    e.add_argument("--scan-dir", required=True)
    e.add_argument("--results-dir", required=True)
    e.add_argument("--refined-dir")
    e.add_argument("--template")
    e.add_argument("--prefix", default="scan")
    e.add_argument("--out", help="report path prefix")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the four-variant ablation")
    a.add_argument("--scan-dir", required=True)
    a.add_argument("--template")
    a.add_argument("--config")
    a.add_argument("--out")
    a.add_argument("--jobs", type=int, default=1)
    a.set_defaults(func=cmd_ablate)

    q = sub.add_parser("grid", help="regularizer weight grid search")
    q.add_argument("--scan-dir", required=True)
    q.add_argument("--template")
    q.add_argument("--config")
    q.add_argument("--out")
    q.add_argument("--jobs", type=int, default=1)
    q.set_defaults(func=cmd_grid)

    v = sub.add_parser("video", help="sequential vs individual sequence fitting")
    v.add_argument("--scan-dir", required=True)
    v.add_argument("--template")
    v.add_argument("--config")
    v.add_argument("--out")
    v.set_defaults(func=cmd_video)

    x = sub.add_parser("export-pseudo", help="filter and export pseudo labels")
    x.add_argument("--scan-dir", required=True)
    x.add_argument("--results-dir", required=True)
    x.add_argument("--refined-dir", required=True)
    x.add_argument("--drop-fraction", type=float, default=0.2)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_pseudo)

    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DegenerateInitError as exc:
        print(f"error: degenerate initialization: {exc}\n"
              "hint: too few / collinear part centroids; try --variant 1 "
              "(multi-start without centroid init)", file=sys.stderr)
        return 3
    except NumericFailureError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 4
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
