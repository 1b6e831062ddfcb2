"""Evaluation metrics (vertex-to-vertex, joint position error, segmentation
scores) and the ablation / grid-search / sequence-fitting report harnesses.

All report emitters are pure: identical inputs render identical bytes.
"""

from dataclasses import dataclass, replace as dc_replace

import numpy as np

from .fit import FitConfig, VARIANT_NAMES, run_variant
from .initreg import DegenerateInitError
from .model import joints_world, pose_mesh
from .optim import NumericFailureError

MAP_DEFINITION = ("mAP = macro-averaged per-class precision over classes "
                  "present in prediction or ground truth; a class absent "
                  "from the prediction scores precision 0.")


def v2v(pred_vertices, gt_vertices):
    """Mean vertex-to-vertex Euclidean distance in millimeters.

    Requires equal counts in corresponding order; no alignment is applied.
    """
    a = np.asarray(pred_vertices, dtype=np.float64)
    b = np.asarray(gt_vertices, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"vertex count mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.linalg.norm(a - b, axis=1)) * 1000.0)


def mpjpe(pred_joints, gt_joints):
    """Mean per-joint position error in millimeters."""
    a = np.asarray(pred_joints, dtype=np.float64)
    b = np.asarray(gt_joints, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"joint count mismatch: {a.shape} vs {b.shape}")
    return float(np.mean(np.linalg.norm(a - b, axis=1)) * 1000.0)


@dataclass(frozen=True)
class SegScores:
    accuracy: float
    iou_per_class: dict
    mean_iou: float
    mean_ap: float

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "iou_per_class": {str(k): v for k, v in self.iou_per_class.items()},
            "mean_iou": self.mean_iou,
            "mean_ap": self.mean_ap,
        }


def seg_metrics(pred_labels, gt_labels, num_parts):
    """Pointwise segmentation scores over labels in 0..num_parts.

    Accuracy is exact-match fraction. IoU is computed per class present
    in the ground truth and macro-averaged. mAP follows MAP_DEFINITION.
    """
    pred = np.asarray(pred_labels, dtype=np.int64)
    gt = np.asarray(gt_labels, dtype=np.int64)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ValueError("pred and gt labels must be equal-length 1-D arrays")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.size and (arr.min() < 0 or arr.max() > num_parts):
            raise ValueError(f"{name} labels out of range 0..{num_parts}")

    acc = float(np.mean(pred == gt))

    iou = {}
    for c in np.unique(gt):
        inter = np.sum((pred == c) & (gt == c))
        union = np.sum((pred == c) | (gt == c))
        iou[int(c)] = float(inter / union) if union else 0.0
    mean_iou = float(np.mean(list(iou.values()))) if iou else 0.0

    classes = np.union1d(np.unique(gt), np.unique(pred))
    precisions = []
    for c in classes:
        npred = np.sum(pred == c)
        if npred == 0:
            precisions.append(0.0)
        else:
            precisions.append(float(np.sum((pred == c) & (gt == c)) / npred))
    mean_ap = float(np.mean(precisions)) if len(precisions) else 0.0

    return SegScores(accuracy=acc, iou_per_class=iou, mean_iou=mean_iou,
                     mean_ap=mean_ap)


# ---------------------------------------------------------------------------
# Text rendering
# ---------------------------------------------------------------------------

def render_table(headers, rows, title=None):
    """Aligned plain-text table; pure function of its inputs."""
    cells = [[str(h) for h in headers]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(headers))]
    lines = []
    if title:
        lines.append(title)
    for j, row in enumerate(cells):
        lines.append("  ".join(c.rjust(w) for c, w in zip(row, widths)))
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _fmt(x, nd=1):
    return f"{x:.{nd}f}" if x is not None and np.isfinite(x) else "--"


# ---------------------------------------------------------------------------
# Single-scan evaluation helpers
# ---------------------------------------------------------------------------

def evaluate_fit(result, gt, template, human=0):
    """V2V and MPJPE of one fit result against generator ground truth."""
    pred_verts = pose_mesh(template, result.params)
    pred_joints = joints_world(template, result.params)
    return (v2v(pred_verts, gt.vertices[human]),
            mpjpe(pred_joints, gt.joints[human]))


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationReport:
    per_variant: dict   # variant -> {"v2v_mm", "mpjpe_mm", "time_s", "n"}
    n_scans: int
    n_failed: dict      # variant -> failure count

    def to_dict(self):
        return {
            "per_variant": {str(k): dict(v) for k, v in self.per_variant.items()},
            "n_scans": self.n_scans,
            "n_failed": {str(k): v for k, v in self.n_failed.items()},
        }

    def render_text(self):
        rows = []
        for variant in sorted(self.per_variant):
            s = self.per_variant[variant]
            rows.append([
                variant, VARIANT_NAMES[variant],
                _fmt(s["v2v_mm"]), _fmt(s["mpjpe_mm"]),
                _fmt(s["time_s"], 2), s["n"], self.n_failed.get(variant, 0),
            ])
        return render_table(
            ["variant", "description", "V2V", "MPJPE", "Time", "n", "failed"],
            rows, title=f"Ablation over {self.n_scans} scans "
                        "(V2V/MPJPE in mm, Time in s)",
        )


def _variant_task(task):
    """Worker for one (scan, variant) cell; None marks a failed fit."""
    cloud, gt, template, config, variant = task
    try:
        res = run_variant(cloud, template, config, variant)
    except (DegenerateInitError, NumericFailureError):
        return None
    e_v, e_j = evaluate_fit(res, gt, template)
    return e_v, e_j, res.wall_time


def _map_tasks(fn, tasks, jobs):
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, tasks))
    return [fn(t) for t in tasks]


def ablation_report(scans, template, config=None, variants=(1, 2, 3, 4),
                    progress=None, jobs=1):
    """Run the ablation variants over (cloud, gt) pairs and aggregate
    per-variant mean V2V, MPJPE, and wall time. Per-scan failures are
    excluded from the means and counted. Results are joined in scan
    order regardless of `jobs`."""
    if len(scans) < 1:
        raise ValueError("need at least one scan")
    config = config or FitConfig()
    per_variant = {}
    n_failed = {}
    for variant in variants:
        tasks = [(cloud, gt, template, config, variant) for cloud, gt in scans]
        outcomes = _map_tasks(_variant_task, tasks, jobs)
        ok = [o for o in outcomes if o is not None]
        if progress:
            for i, o in enumerate(outcomes):
                if o is not None:
                    progress(variant, i, o[0])
        per_variant[variant] = {
            "v2v_mm": float(np.mean([o[0] for o in ok])) if ok else float("nan"),
            "mpjpe_mm": float(np.mean([o[1] for o in ok])) if ok else float("nan"),
            "time_s": float(np.mean([o[2] for o in ok])) if ok else float("nan"),
            "n": len(ok),
        }
        n_failed[variant] = len(outcomes) - len(ok)
    return AblationReport(per_variant=per_variant, n_scans=len(scans),
                          n_failed=n_failed)


# ---------------------------------------------------------------------------
# Hyperparameter grid search
# ---------------------------------------------------------------------------

GRID_VALUES = (0.0, 0.5, 1.0, 2.0)


@dataclass(frozen=True)
class GridSearchReport:
    values: tuple
    v2v_table: np.ndarray  # rows: lambda_shape, cols: lambda_pose

    def to_dict(self):
        return {
            "values": list(self.values),
            "rows": "lambda_shape",
            "cols": "lambda_pose",
            "v2v_mm": [[float(x) for x in row] for row in self.v2v_table],
        }

    def best_cell(self):
        i, j = np.unravel_index(np.argmin(self.v2v_table),
                                self.v2v_table.shape)
        return self.values[i], self.values[j], float(self.v2v_table[i, j])

    def render_text(self):
        rows = []
        for i, vs in enumerate(self.values):
            rows.append([f"shape={vs}"] + [_fmt(self.v2v_table[i, j])
                                           for j in range(len(self.values))])
        return render_table(
            ["lambda_shape \\ lambda_pose"] + [f"pose={v}" for v in self.values],
            rows, title="Mean V2V (mm) over the regularizer weight grid",
        )


def grid_search(scans, template, config=None, values=GRID_VALUES,
                progress=None, jobs=1):
    """Full-method fit per (lambda_shape, lambda_pose) cell per scan;
    reports the mean V2V table (rows: lambda_shape, cols: lambda_pose)."""
    config = config or FitConfig()
    n = len(values)
    table = np.zeros((n, n))
    for i, ls in enumerate(values):
        for j, lp in enumerate(values):
            cfg = dc_replace(config, lambda_shape=ls, lambda_pose=lp)
            tasks = [(cloud, gt, template, cfg, 4) for cloud, gt in scans]
            outcomes = _map_tasks(_variant_task, tasks, jobs)
            errs = [o[0] for o in outcomes if o is not None]
            table[i, j] = float(np.mean(errs)) if errs else float("nan")
            if progress:
                progress(ls, lp, table[i, j])
    return GridSearchReport(values=tuple(values), v2v_table=table)


# ---------------------------------------------------------------------------
# Sequence-fitting report
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SequenceStats:
    time_s: float
    v2v_mm: float
    j2j_mm: float
    steps: float


@dataclass(frozen=True)
class VideoSequenceResult:
    name: str
    human_count: int
    modes: dict  # mode name -> SequenceStats


def evaluate_sequence(results, gts, template):
    """Per-frame means of (time, V2V, J2J, steps) for one fitted sequence.
    Frames whose fit failed (None) are skipped."""
    times, v2vs, j2js, steps = [], [], [], []
    for res, gt in zip(results, gts):
        if res is None:
            continue
        e_v, e_j = evaluate_fit(res, gt, template)
        times.append(res.wall_time)
        v2vs.append(e_v)
        j2js.append(e_j)
        steps.append(res.steps_taken)
    if not times:
        raise ValueError("sequence has no successful frames")
    return SequenceStats(time_s=float(np.mean(times)),
                         v2v_mm=float(np.mean(v2vs)),
                         j2j_mm=float(np.mean(j2js)),
                         steps=float(np.mean(steps)))


@dataclass(frozen=True)
class VideoReport:
    sequences: tuple
    modes: tuple

    def weighted_average(self, mode):
        w = np.array([s.human_count for s in self.sequences], dtype=np.float64)
        out = {}
        for field_name in ("time_s", "v2v_mm", "j2j_mm", "steps"):
            vals = np.array([getattr(s.modes[mode], field_name)
                             for s in self.sequences])
            out[field_name] = float(np.sum(vals * w) / np.sum(w))
        return out

    def to_dict(self):
        return {
            "sequences": [
                {"name": s.name, "human_count": s.human_count,
                 "modes": {m: vars(st) for m, st in s.modes.items()}}
                for s in self.sequences
            ],
            "weighted_average": {m: self.weighted_average(m)
                                 for m in self.modes},
        }

    def render_text(self):
        headers = ["metric"] + [s.name for s in self.sequences] + ["Weighted Average"]
        lines = []
        for mode in self.modes:
            rows = []
            wa = self.weighted_average(mode)
            for label, attr, nd in (("Time [s]", "time_s", 3),
                                    ("V2V [mm]", "v2v_mm", 1),
                                    ("J2J [mm]", "j2j_mm", 1)):
                row = [label] + [_fmt(getattr(s.modes[mode], attr), nd)
                                 for s in self.sequences] + [_fmt(wa[attr], nd)]
                rows.append(row)
            lines.append(render_table(headers, rows, title=mode.capitalize()))
        counts = ["Number of Humans"] + [str(s.human_count) for s in self.sequences] + ["-"]
        lines.append("  ".join(counts) + "\n")
        return "\n".join(lines)


def video_report(sequences):
    """Aggregate per-mode sequence stats with a human-count weighted
    average column. All sequences must carry the same set of modes."""
    if not sequences:
        raise ValueError("no sequences")
    modes = tuple(sorted(sequences[0].modes))
    for s in sequences:
        if tuple(sorted(s.modes)) != modes:
            raise ValueError(
                f"sequence {s.name!r} modes {sorted(s.modes)} do not match "
                f"{list(modes)}"
            )
    return VideoReport(sequences=tuple(sequences), modes=modes)
