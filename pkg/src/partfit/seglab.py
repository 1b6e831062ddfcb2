"""Label operations: post-fit refinement by weighted kNN majority voting,
synthetic label corruption (a stand-in for an upstream segmentation
network's errors), pseudo-label filtering and export."""

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geom import LabeledPointCloud, NnIndex


@dataclass(frozen=True)
class RefineConfig:
    n: int = 5
    background_distance: float = 0.1
    epsilon: float = 1e-3
    weight_mode: str = "inverse"  # inverse | inverse_sq | softmax

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.background_distance <= 0:
            raise ValueError("background_distance must be > 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.weight_mode not in ("inverse", "inverse_sq", "softmax"):
            raise ValueError(f"unknown weight_mode {self.weight_mode!r}")


@dataclass(frozen=True)
class CorruptionRates:
    uniform_flip: float = 0.10
    lr_swap: float = 0.05
    clutter_leak: float = 0.05

    def __post_init__(self):
        for name in ("uniform_flip", "lr_swap", "clutter_leak"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


def _neighbor_weights(dists, config: RefineConfig):
    if config.weight_mode == "inverse":
        return 1.0 / (dists + config.epsilon)
    if config.weight_mode == "inverse_sq":
        return 1.0 / (dists + config.epsilon) ** 2
    # softmax over negative distance at temperature epsilon
    z = -dists / config.epsilon
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def refine_labels(cloud: LabeledPointCloud, posed_vertices, vertex_labels,
                  config: RefineConfig = RefineConfig()):
    """Reassign per-point part labels from the fitted mesh.

    Each point collects its n nearest mesh vertices, weights them by
    inverse distance, and takes the part with the largest summed weight
    (ties go to the lower part id). Points whose nearest vertex is
    farther than `background_distance` become background (0).
    """
    verts = np.asarray(posed_vertices, dtype=np.float64)
    vlabels = np.asarray(vertex_labels, dtype=np.int64)
    if verts.shape[0] == 0:
        raise ValueError("empty mesh")
    if vlabels.shape != (verts.shape[0],):
        raise ValueError("vertex_labels must match vertex count")

    index = NnIndex(verts)
    idx, dists = index.query(cloud.points, k=config.n)

    weights = _neighbor_weights(dists, config)
    nbr_labels = vlabels[idx]
    num_classes = int(vlabels.max()) + 1
    scores = np.zeros((len(cloud), num_classes))
    rows = np.repeat(np.arange(len(cloud)), config.n)
    np.add.at(scores, (rows, nbr_labels.ravel()), weights.ravel())
    labels = np.argmax(scores, axis=1).astype(np.int64)  # first max = lowest id

    labels[dists[:, 0] > config.background_distance] = 0
    return labels


def corrupt_labels(cloud: LabeledPointCloud, rates: CorruptionRates, seed,
                   num_parts: int, lr_pairs=None):
    """Independently corrupt per-point labels; deterministic per seed.

    With probability uniform_flip a labeled point gets a uniformly random
    part id (possibly its own); otherwise with probability lr_swap its
    part is swapped with its left/right counterpart. With probability
    clutter_leak a background point takes the label of its nearest
    labeled point.
    """
    labels = cloud.labels.copy()
    n = labels.shape[0]
    rng = np.random.default_rng(seed)
    u = rng.random((n, 3))
    flip_targets = rng.integers(1, num_parts + 1, size=n)

    fg = labels > 0
    flip = fg & (u[:, 0] < rates.uniform_flip)
    labels[flip] = flip_targets[flip]

    if lr_pairs:
        pair_map = np.arange(num_parts + 1)
        for a, b in lr_pairs.items():
            pair_map[a] = b
        swap = fg & ~flip & (u[:, 1] < rates.lr_swap)
        labels[swap] = pair_map[labels[swap]]

    bg = ~fg
    leak = bg & (u[:, 2] < rates.clutter_leak)
    if leak.any() and fg.any():
        index = NnIndex(cloud.points[fg])
        fg_idx = np.nonzero(fg)[0]
        nn, _ = index.query(cloud.points[leak], k=1)
        labels[leak] = cloud.labels[fg_idx[nn[:, 0]]]
    return labels


def filter_pseudo_labels(results, fraction, key="normalized"):
    """Split fit results into (kept, dropped) index lists, dropping the
    ceil(fraction * N) with the highest final loss (loss ties drop the
    higher index first). Both lists come back sorted ascending.

    With key="normalized" (default) the ranking uses the scan-size
    normalized energy, which is comparable across scans whose visible
    point counts differ; key="raw" ranks by the plain final loss.
    """
    if not results:
        raise ValueError("no results to filter")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    if key not in ("normalized", "raw"):
        raise ValueError(f"unknown filter key {key!r}")
    if key == "normalized":
        losses = [float(r.normalized_loss) for r in results]
        if any(math.isnan(x) for x in losses):
            losses = [float(r.final_loss) for r in results]
    else:
        losses = [float(r.final_loss) for r in results]
    n_drop = math.ceil(fraction * len(losses))
    order = sorted(range(len(losses)), key=lambda i: (-losses[i], -i))
    dropped = sorted(order[:n_drop])
    kept = sorted(order[n_drop:])
    return kept, dropped


def export_pseudo_dataset(clouds, refined_labels, kept_indices, path,
                          losses=None, config_digest="", sources=None):
    """Write the kept scans with refined labels as labeled-PLY files plus
    a manifest listing source, final loss, and config digest."""
    from . import formats  # local import; formats depends on this module's types

    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    kept = sorted(int(i) for i in kept_indices)
    for i in kept:
        if i < 0 or i >= len(clouds):
            raise IndexError(f"kept index {i} out of range")

    entries = []
    for i in kept:
        cloud = clouds[i]
        relabeled = LabeledPointCloud(cloud.points, refined_labels[i],
                                      human_ids=cloud.human_ids)
        fname = f"pseudo_{i:04d}.ply"
        formats.save_labeled_ply(out / fname, relabeled)
        entries.append({
            "index": i,
            "file": fname,
            "source": (sources[i] if sources is not None else f"scan_{i:04d}"),
            "final_loss": (float(losses[i]) if losses is not None else None),
        })
    manifest = {"config_digest": config_digest, "entries": entries}
    formats.save_json(out / "manifest.json", manifest)
    return out / "manifest.json"
