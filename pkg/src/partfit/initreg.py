"""Segmentation-driven initialization: scan-side part centroids, weighted
rigid alignment of model centroids onto scan centroids, a cheap
centroid-only pose solve, and the 4-orientation multi-start fallback."""

from dataclasses import dataclass

import numpy as np

from . import optim
from .geom import (DegenerateGeometryError, LabeledPointCloud,
                   axis_angle_to_matrix, canonical_axis_angle, kabsch,
                   matrix_to_axis_angle)
from .model import (BodyParams, RiggedTemplate, canonicalize_theta,
                    model_part_centroids, part_means, pose_backward,
                    pose_forward)


class DegenerateInitError(RuntimeError):
    """Centroid configuration too degenerate to initialize from (fewer than
    3 parts present, or present parts collinear). Callers may fall back to
    multi_start."""


@dataclass(frozen=True)
class CentroidInitConfig:
    """Both phases are independently switchable so the centroid-only
    ablation can be measured with or without the pose solve."""

    use_rigid_phase: bool = True
    use_pose_phase: bool = True
    max_steps: int = 50
    learning_rate: float = 0.05
    patience: int = 10
    min_relative_improvement: float = 1e-5


MULTI_START_YAWS = (0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi)


def scan_part_centroids(cloud: LabeledPointCloud, num_parts: int):
    """Per-part centroid and point count of the labeled scan.

    Returns (centroids (K, 3) with NaN rows for absent parts,
    counts (K,)). Background points are ignored; absent parts are never
    zero-filled.
    """
    if len(cloud) == 0:
        raise ValueError("empty cloud")
    if not np.any(cloud.labels > 0):
        raise ValueError("cloud has no non-background points")
    centroids = part_means(cloud.points, cloud.labels, num_parts)
    counts = np.bincount(cloud.labels, minlength=num_parts + 1)[1:num_parts + 1]
    return centroids, counts.astype(np.int64)


def _centroid_loss_and_grad(template, theta, beta, t, targets, weights,
                            part_rows):
    """Weighted squared distance from model part centroids to scan
    centroids, with its gradient over (theta, t)."""
    posed, cache = pose_forward(template, theta, beta, t)
    loss = 0.0
    adjoint = np.zeros_like(posed)
    for k, target, w in zip(part_rows, targets, weights):
        idx = template.part_vertex_indices(k)
        c = posed[idx].mean(axis=0)
        d = c - target
        loss += w * float(d @ d)
        adjoint[idx] += (2.0 * w / idx.size) * d
    g_theta, _, g_t = pose_backward(template, cache, adjoint)
    return loss, g_theta, g_t


def centroid_init(scan_centroids, scan_counts, template: RiggedTemplate,
                  config: CentroidInitConfig = CentroidInitConfig()) -> BodyParams:
    """Initialize body parameters from part centroids.

    Phase 1 solves a count-weighted rigid alignment of the identity-pose
    model centroids onto the scan centroids and writes it into the root
    rotation/translation. Phase 2 refines the pose by minimizing the
    count-weighted centroid distance with a short Adam run. Shape stays
    zero. Raises DegenerateInitError when fewer than 3 parts are present
    or the present centroids are collinear.
    """
    scan_centroids = np.asarray(scan_centroids, dtype=np.float64)
    counts = np.asarray(scan_counts, dtype=np.float64)
    present = np.nonzero((counts > 0) & np.all(np.isfinite(scan_centroids), axis=1))[0]
    if present.size < 3:
        raise DegenerateInitError(
            f"only {present.size} parts present; need at least 3"
        )
    part_rows = present + 1  # part ids are 1-based

    params = BodyParams.identity(template)
    model_cents = model_part_centroids(template, params)

    if config.use_rigid_phase:
        try:
            rigid = kabsch(model_cents[present], scan_centroids[present],
                           counts[present])
        except DegenerateGeometryError as exc:
            raise DegenerateInitError(str(exc)) from exc
        # Root rotation acts about the root joint rest position, so fold
        # the pivot into the translation: R x + t_k = R (x - o) + o + t.
        root = template.rest_joints[0]
        omega = matrix_to_axis_angle(rigid.rotation)
        t = rigid.translation - root + rigid.rotation @ root
        theta = params.theta.copy()
        theta[0] = omega
        params = params.replace(theta=theta, translation=t)

    if config.use_pose_phase:
        nj = template.num_joints
        targets = scan_centroids[present]
        weights = counts[present]

        def value_and_grad(x):
            theta = x[: 3 * nj].reshape(nj, 3)
            t = x[3 * nj:]
            loss, g_theta, g_t = _centroid_loss_and_grad(
                template, theta, params.beta, t, targets, weights, part_rows
            )
            return loss, np.concatenate([g_theta.ravel(), g_t])

        x0 = np.concatenate([params.theta.ravel(), params.translation])
        result = optim.minimize_adam(
            value_and_grad, x0,
            max_steps=config.max_steps,
            learning_rate=config.learning_rate,
            patience=config.patience,
            min_relative_improvement=config.min_relative_improvement,
        )
        theta = result.x[: 3 * nj].reshape(nj, 3)
        params = params.replace(theta=canonicalize_theta(theta),
                                translation=result.x[3 * nj:])

    return params


def centroid_init_from_cloud(cloud: LabeledPointCloud,
                             template: RiggedTemplate,
                             config: CentroidInitConfig = CentroidInitConfig()):
    cents, counts = scan_part_centroids(cloud, template.num_parts)
    return centroid_init(cents, counts, template, config)


def multi_start(cloud: LabeledPointCloud, template: RiggedTemplate):
    """Four identity-pose seeds differing only in root yaw (0, 90, 180,
    270 degrees), all translated so the model sits at the center of the
    cloud's non-background bounding box (all points when nothing is
    labeled). The caller fits from each seed and keeps the lowest loss."""
    pts = cloud.points
    fg = cloud.labels > 0
    if fg.any():
        pts = pts[fg]
    center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))

    rest_center = template.rest_vertices.mean(axis=0)
    root = template.rest_joints[0]
    seeds = []
    for yaw in MULTI_START_YAWS:
        omega = canonical_axis_angle(np.array([0.0, 0.0, yaw]))
        R = axis_angle_to_matrix(omega)
        # Posed body center = R (c - o) + o + t; solve t for the bbox center.
        t = center - (R @ (rest_center - root) + root)
        theta = np.zeros((template.num_joints, 3))
        theta[0] = omega
        seeds.append(BodyParams(theta, np.zeros(template.num_shapes), t))
    return seeds
