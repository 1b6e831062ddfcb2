"""partfit: fit an articulated humanoid to labeled 3D point clouds and
refine per-point body-part labels, with a built-in synthetic scan
generator and evaluation harnesses."""

from .fit import (FitConfig, FitResult, fit_sequence, gradient, objective,
                  run_variant)
from .geom import (DegenerateGeometryError, LabeledPointCloud, NnIndex,
                   RigidTransform, build_index, data_term, huber, kabsch,
                   nearest)
from .initreg import (CentroidInitConfig, DegenerateInitError, centroid_init,
                      centroid_init_from_cloud, multi_start,
                      scan_part_centroids)
from .metrics import (ablation_report, grid_search, mpjpe, seg_metrics, v2v,
                      video_report)
from .model import (BodyParams, RiggedTemplate, builtin_humanoid,
                    joints_world, model_part_centroids, pose_mesh)
from .seglab import (CorruptionRates, RefineConfig, corrupt_labels,
                     export_pseudo_dataset, filter_pseudo_labels,
                     refine_labels)
from .synth import (GroundTruth, ScanRecipe, render_scan, render_sequence,
                    sample_pose, sample_scene)

__version__ = "0.1.0"

__all__ = [
    "BodyParams", "CentroidInitConfig", "CorruptionRates",
    "DegenerateGeometryError", "DegenerateInitError", "FitConfig",
    "FitResult", "GroundTruth", "LabeledPointCloud", "NnIndex",
    "RefineConfig", "RiggedTemplate", "RigidTransform", "ScanRecipe",
    "ablation_report", "build_index", "builtin_humanoid", "centroid_init",
    "centroid_init_from_cloud", "corrupt_labels", "data_term",
    "export_pseudo_dataset", "filter_pseudo_labels", "fit_sequence",
    "gradient", "grid_search", "huber", "joints_world", "kabsch",
    "model_part_centroids", "mpjpe", "multi_start", "nearest", "objective",
    "pose_mesh", "refine_labels", "render_scan", "render_sequence",
    "run_variant", "sample_pose", "sample_scene", "scan_part_centroids",
    "seg_metrics", "v2v", "video_report",
]
