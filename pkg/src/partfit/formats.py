"""Bit-exact file formats: labeled ASCII PLY, template / ground-truth /
config / result JSON documents, and manifests.

Coordinates are written with repr() (shortest round-trip form), so reading
a file back reproduces the exact float64 values and rewriting produces
identical bytes. JSON is always dumped with sorted keys.
"""

import dataclasses
import hashlib
import json
from pathlib import Path

import numpy as np

from .fit import FitConfig, FitResult
from .geom import LabeledPointCloud
from .model import BodyParams, RiggedTemplate
from .synth import GroundTruth

FORMAT_VERSION = "1"


# ---------------------------------------------------------------------------
# JSON plumbing
# ---------------------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return None if not np.isfinite(f) else f
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def canonical_json(obj):
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def save_json(path, obj):
    Path(path).write_text(canonical_json(obj))


def load_json(path):
    return json.loads(Path(path).read_text())


def digest(obj):
    """Stable short hash of a JSON-able object (configs, recipes)."""
    packed = json.dumps(_jsonable(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(packed.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Config documents (strict: unknown keys are errors)
# ---------------------------------------------------------------------------

_TUPLE_FIELDS = {
    "camera_position": tuple,
    "camera_look_at": tuple,
    "part_names": tuple,
    "joint_names": tuple,
}


def config_to_dict(cfg):
    out = {}
    for f in dataclasses.fields(cfg):
        out[f.name] = _jsonable(getattr(cfg, f.name))
    return out


def config_from_dict(cls, data):
    """Build a config dataclass from a dict; unknown keys raise."""
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {unknown}")
    kwargs = {}
    for key, value in data.items():
        if key in _TUPLE_FIELDS and value is not None:
            value = _TUPLE_FIELDS[key](value)
        if key == "occluders" and value is not None:
            value = tuple((tuple(c), tuple(h)) for c, h in value)
        kwargs[key] = value
    return cls(**kwargs)


def load_config(path, cls):
    return config_from_dict(cls, load_json(path))


# ---------------------------------------------------------------------------
# Labeled PLY
# ---------------------------------------------------------------------------

def save_labeled_ply(path, cloud: LabeledPointCloud):
    n = len(cloud)
    with_human = cloud.human_ids is not None
    lines = [
        "ply",
        "format ascii 1.0",
        "comment labeled point cloud",
        f"element vertex {n}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar part_label",
    ]
    if with_human:
        lines.append("property uchar human_id")
    lines.append("end_header")
    for i in range(n):
        x, y, z = (float(v) for v in cloud.points[i])
        row = f"{x!r} {y!r} {z!r} {int(cloud.labels[i])}"
        if with_human:
            row += f" {int(cloud.human_ids[i])}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def load_labeled_ply(path) -> LabeledPointCloud:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise ValueError(f"{path}: not a PLY file")
    props = []
    n = None
    i = 1
    while i < len(text):
        line = text[i].strip()
        i += 1
        if line == "end_header":
            break
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        elif line.startswith("property"):
            props.append(line.split()[-1])
    else:
        raise ValueError(f"{path}: missing end_header")
    if n is None:
        raise ValueError(f"{path}: missing vertex element")
    expected = ["x", "y", "z", "part_label"]
    if props[:4] != expected:
        raise ValueError(f"{path}: unexpected vertex properties {props}")
    with_human = len(props) > 4 and props[4] == "human_id"

    rows = text[i:i + n]
    if len(rows) < n:
        raise ValueError(f"{path}: expected {n} vertex rows, found {len(rows)}")
    pts = np.empty((n, 3))
    labels = np.empty(n, dtype=np.int64)
    human = np.zeros(n, dtype=np.int64) if with_human else None
    for j, row in enumerate(rows):
        parts = row.split()
        pts[j] = [float(parts[0]), float(parts[1]), float(parts[2])]
        labels[j] = int(parts[3])
        if with_human:
            human[j] = int(parts[4])
    return LabeledPointCloud(pts, labels, human_ids=human)


# ---------------------------------------------------------------------------
# Body params / ground truth / fit results
# ---------------------------------------------------------------------------

def params_to_dict(params: BodyParams):
    return {
        "theta": params.theta.tolist(),
        "beta": params.beta.tolist(),
        "translation": params.translation.tolist(),
    }


def params_from_dict(d) -> BodyParams:
    return BodyParams(np.asarray(d["theta"], dtype=np.float64),
                      np.asarray(d["beta"], dtype=np.float64),
                      np.asarray(d["translation"], dtype=np.float64))


def save_ground_truth(path, gt: GroundTruth):
    doc = {
        "format_version": FORMAT_VERSION,
        "seed": _jsonable(gt.seed),
        "humans": [
            {
                "params": params_to_dict(p),
                "vertices": v.tolist(),
                "joints": j.tolist(),
            }
            for p, v, j in zip(gt.params, gt.vertices, gt.joints)
        ],
        "labels": gt.labels.tolist(),
        "human_ids": gt.human_ids.tolist(),
        "part_centroids": _jsonable(gt.part_centroids),
        "part_counts": gt.part_counts.tolist(),
    }
    save_json(path, doc)


def load_ground_truth(path) -> GroundTruth:
    doc = load_json(path)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format_version")
    params, verts, joints = [], [], []
    for h in doc["humans"]:
        params.append(params_from_dict(h["params"]))
        verts.append(np.asarray(h["vertices"], dtype=np.float64))
        joints.append(np.asarray(h["joints"], dtype=np.float64))
    cents = np.asarray(
        [[np.nan if x is None else x for x in row]
         for row in doc["part_centroids"]], dtype=np.float64)
    return GroundTruth(
        params=tuple(params), vertices=tuple(verts), joints=tuple(joints),
        labels=np.asarray(doc["labels"], dtype=np.int64),
        human_ids=np.asarray(doc["human_ids"], dtype=np.int64),
        part_centroids=cents,
        part_counts=np.asarray(doc["part_counts"], dtype=np.int64),
        seed=doc["seed"],
    )


def save_fit_result(path, result: FitResult, config: FitConfig, variant=None,
                    scan_name=None):
    """Primary result JSON is deterministic; wall time goes to a sidecar
    (`<path>.timing.json`) so reruns are byte-identical."""
    doc = {
        "format_version": FORMAT_VERSION,
        "variant": variant,
        "scan": scan_name,
        "params": params_to_dict(result.params),
        "final_loss": result.final_loss,
        "data_loss": result.data_loss,
        "pose_loss": result.pose_loss,
        "shape_loss": result.shape_loss,
        "normalized_loss": result.normalized_loss,
        "points_used": result.points_used,
        "steps_taken": result.steps_taken,
        "converged": result.converged,
        "init_used": result.init_used,
        "config": config_to_dict(config),
        "config_digest": digest(config_to_dict(config)),
    }
    save_json(path, doc)
    save_json(str(path) + ".timing.json", {"wall_time": result.wall_time})


def load_fit_result(path):
    """Reload a fit result; wall time comes from the sidecar when present."""
    doc = load_json(path)
    timing = Path(str(path) + ".timing.json")
    wall = load_json(timing)["wall_time"] if timing.exists() else 0.0
    result = FitResult(
        params=params_from_dict(doc["params"]),
        final_loss=doc["final_loss"],
        data_loss=doc["data_loss"],
        pose_loss=doc["pose_loss"],
        shape_loss=doc["shape_loss"],
        steps_taken=doc["steps_taken"],
        wall_time=wall,
        converged=doc["converged"],
        init_used=doc["init_used"],
        points_used=doc.get("points_used", 0),
        normalized_loss=(float("nan") if doc.get("normalized_loss") is None
                         else doc["normalized_loss"]),
    )
    return result, doc


# ---------------------------------------------------------------------------
# Template document
# ---------------------------------------------------------------------------

_TEMPLATE_KEYS = {
    "format_version", "num_parts", "part_names", "joint_names",
    "rest_vertices", "faces", "vertex_part", "parents", "joint_offsets",
    "skin_joints", "skin_weights", "blendshapes", "joint_limits",
}


def save_template(path, template: RiggedTemplate):
    doc = {
        "format_version": FORMAT_VERSION,
        "num_parts": template.num_parts,
        "part_names": list(template.part_names),
        "joint_names": list(template.joint_names),
        "rest_vertices": template.rest_vertices.tolist(),
        "faces": template.faces.tolist(),
        "vertex_part": template.vertex_part.tolist(),
        "parents": template.parents.tolist(),
        "joint_offsets": template.joint_offsets.tolist(),
        "skin_joints": template.skin_joints.tolist(),
        "skin_weights": template.skin_weights.tolist(),
        "blendshapes": template.blendshapes.tolist(),
        "joint_limits": _jsonable(template.joint_limits),
    }
    save_json(path, doc)


def load_template(path) -> RiggedTemplate:
    doc = load_json(path)
    unknown = sorted(set(doc) - _TEMPLATE_KEYS)
    if unknown:
        raise ValueError(f"{path}: unknown template keys: {unknown}")
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format_version "
                         f"{doc.get('format_version')!r}")
    limits = doc.get("joint_limits")
    return RiggedTemplate(
        rest_vertices=np.asarray(doc["rest_vertices"], dtype=np.float64),
        faces=np.asarray(doc["faces"], dtype=np.int64),
        vertex_part=np.asarray(doc["vertex_part"], dtype=np.int64),
        parents=np.asarray(doc["parents"], dtype=np.int64),
        joint_offsets=np.asarray(doc["joint_offsets"], dtype=np.float64),
        skin_joints=np.asarray(doc["skin_joints"], dtype=np.int64),
        skin_weights=np.asarray(doc["skin_weights"], dtype=np.float64),
        blendshapes=np.asarray(doc["blendshapes"], dtype=np.float64),
        num_parts=int(doc["num_parts"]),
        part_names=tuple(doc["part_names"]),
        joint_names=tuple(doc["joint_names"]),
        joint_limits=(None if limits is None
                      else np.asarray(limits, dtype=np.float64)),
    )


def save_obj(path, vertices, faces):
    """Minimal Wavefront OBJ writer for fitted meshes."""
    lines = []
    for v in np.asarray(vertices, dtype=np.float64):
        lines.append(f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}")
    for f in np.asarray(faces, dtype=np.int64):
        lines.append(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")
