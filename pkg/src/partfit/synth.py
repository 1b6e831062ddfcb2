"""Ground-truth scene and scan generation: pose sampling, single-view
surface sampling with z-buffer hidden-point removal, depth-style sensor
noise, boxy occluders, clutter, and label corruption.

Everything is a pure function of (recipe, seed): the same inputs produce
bit-identical scans.
"""

import math
from dataclasses import dataclass, replace

import numpy as np

from .geom import (LabeledPointCloud, axis_angle_to_matrix, canonical_axis_angle,
                   matrix_to_axis_angle)
from .model import (BodyParams, RiggedTemplate, joints_world, part_means,
                    pose_mesh)
from .seglab import CorruptionRates, corrupt_labels


@dataclass(frozen=True)
class ScanRecipe:
    """Generator configuration. All randomness flows from `seed`."""

    seed: int = 0
    humans: int = 1
    pose_magnitude: float = 0.44
    yaw_range: float = math.pi
    beta_range: float = 0.6
    translation_jitter: float = 0.15
    human_spacing: float = 1.2
    camera_position: tuple = (0.0, 2.8, 1.5)
    camera_look_at: tuple = (0.0, 0.0, 1.0)
    fov_deg: float = 60.0
    resolution: int = 256
    samples_per_m2: float = 8000.0
    noise_sigma: float = 0.005
    occluder_count: int = 2
    occluder_size_min: float = 0.12
    occluder_size_max: float = 0.28
    occluders: tuple | None = None  # explicit ((center), (half_extents)) boxes
    clutter_points: int = 1000
    uniform_flip: float = 0.10
    lr_swap: float = 0.10
    clutter_leak: float = 0.45

    def __post_init__(self):
        if self.humans < 1:
            raise ValueError("humans must be >= 1")
        for name in ("pose_magnitude", "yaw_range", "beta_range",
                     "translation_jitter", "samples_per_m2", "noise_sigma",
                     "occluder_size_min", "occluder_size_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.occluder_count < 0 or self.clutter_points < 0:
            raise ValueError("counts must be >= 0")
        if self.resolution < 16:
            raise ValueError("resolution must be >= 16")

    def corruption_rates(self):
        return CorruptionRates(self.uniform_flip, self.lr_swap,
                               self.clutter_leak)


@dataclass(frozen=True)
class GroundTruth:
    """Everything the generator knows, recorded before label corruption."""

    params: tuple
    vertices: tuple
    joints: tuple
    labels: np.ndarray
    human_ids: np.ndarray
    part_centroids: np.ndarray  # (K, 3), NaN rows for absent parts
    part_counts: np.ndarray
    seed: int


# ---------------------------------------------------------------------------
# Pose and scene sampling
# ---------------------------------------------------------------------------

def sample_pose(template: RiggedTemplate, recipe: ScanRecipe, rng) -> BodyParams:
    """Per-joint axis-angle uniform in +/- pose_magnitude, clamped to the
    template's per-joint limits; shape uniform in +/- beta_range."""
    nj = template.num_joints
    theta = rng.uniform(-recipe.pose_magnitude, recipe.pose_magnitude, (nj, 3))
    if template.joint_limits is not None:
        theta = np.clip(theta, template.joint_limits[..., 0],
                        template.joint_limits[..., 1])
    theta = np.stack([canonical_axis_angle(row) for row in theta])
    beta = rng.uniform(-recipe.beta_range, recipe.beta_range,
                       template.num_shapes)
    return BodyParams(theta, beta, np.zeros(3))


def sample_scene(template: RiggedTemplate, recipe: ScanRecipe, rng):
    """Sample one BodyParams per human: a random pose plus a placement
    (row layout with jitter) and a global yaw folded into the root."""
    out = []
    for h in range(recipe.humans):
        params = sample_pose(template, recipe, rng)
        yaw = rng.uniform(-recipe.yaw_range, recipe.yaw_range)
        Rz = axis_angle_to_matrix(np.array([0.0, 0.0, yaw]))
        root = matrix_to_axis_angle(Rz @ axis_angle_to_matrix(params.theta[0]))
        theta = params.theta.copy()
        theta[0] = root
        offset = np.array([
            (h - (recipe.humans - 1) / 2.0) * recipe.human_spacing, 0.0, 0.0,
        ])
        jitter = rng.uniform(-recipe.translation_jitter,
                             recipe.translation_jitter, 3)
        jitter[2] *= 0.2  # keep feet near the ground
        out.append(BodyParams(theta, params.beta, offset + jitter))
    return out


# ---------------------------------------------------------------------------
# Camera, rasterization, visibility
# ---------------------------------------------------------------------------

def _camera_frame(recipe: ScanRecipe):
    eye = np.asarray(recipe.camera_position, dtype=np.float64)
    look = np.asarray(recipe.camera_look_at, dtype=np.float64)
    fwd = look - eye
    nrm = np.linalg.norm(fwd)
    if nrm < 1e-9:
        raise ValueError("camera position and look-at coincide")
    fwd = fwd / nrm
    up_hint = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up_hint) > 0.999:
        up_hint = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up_hint)
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    tan_half = math.tan(math.radians(recipe.fov_deg) / 2.0)
    return {"eye": eye, "fwd": fwd, "right": right, "up": up,
            "tan_half": tan_half, "res": recipe.resolution}


def _project(cam, pts):
    """Pixel coordinates and camera depth for (N, 3) world points."""
    d = pts - cam["eye"]
    z = d @ cam["fwd"]
    x = d @ cam["right"]
    y = d @ cam["up"]
    res = cam["res"]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = (x / (z * cam["tan_half"]) + 1.0) * 0.5 * res
        py = (y / (z * cam["tan_half"]) + 1.0) * 0.5 * res
    return px, py, z


def _rasterize(cam, triangles):
    """Inverse-depth buffer (res, res) of the nearest surface per pixel.

    `triangles` is (T, 3, 3) world coordinates. Depth (1/z) is
    interpolated linearly in screen space, which is perspective correct.
    """
    res = cam["res"]
    buf = np.zeros((res, res))
    if len(triangles) == 0:
        return buf
    tri = np.asarray(triangles, dtype=np.float64)
    px, py, z = _project(cam, tri.reshape(-1, 3))
    px = px.reshape(-1, 3)
    py = py.reshape(-1, 3)
    z = z.reshape(-1, 3)
    near = 0.05
    ok = np.all(z > near, axis=1)

    for t in np.nonzero(ok)[0]:
        ax, bx, cx = px[t]
        ay, by, cy = py[t]
        iza, izb, izc = 1.0 / z[t]
        x0 = max(int(math.floor(min(ax, bx, cx))), 0)
        x1 = min(int(math.ceil(max(ax, bx, cx))) + 1, res)
        y0 = max(int(math.floor(min(ay, by, cy))), 0)
        y1 = min(int(math.ceil(max(ay, by, cy))) + 1, res)
        if x0 >= x1 or y0 >= y1:
            continue
        den = (by - cy) * (ax - cx) + (cx - bx) * (ay - cy)
        if abs(den) < 1e-12:
            continue
        gx, gy = np.meshgrid(np.arange(x0, x1) + 0.5,
                             np.arange(y0, y1) + 0.5)
        l1 = ((by - cy) * (gx - cx) + (cx - bx) * (gy - cy)) / den
        l2 = ((cy - ay) * (gx - cx) + (ax - cx) * (gy - cy)) / den
        l3 = 1.0 - l1 - l2
        inside = (l1 >= -1e-9) & (l2 >= -1e-9) & (l3 >= -1e-9)
        if not inside.any():
            continue
        invz = l1 * iza + l2 * izb + l3 * izc
        patch = buf[y0:y1, x0:x1]
        np.maximum(patch, np.where(inside, invz, 0.0), out=patch)
    return buf


def _depth_bias(recipe: ScanRecipe, depth):
    """Occlusion-test tolerance: absolute term plus a slope allowance of a
    few pixel footprints at the point's depth."""
    pixel_angle = 2.0 * math.tan(math.radians(recipe.fov_deg) / 2.0) / recipe.resolution
    return 3e-3 + 3.0 * depth * pixel_angle


def _visible_mask(recipe, cam, buf, pts):
    px, py, z = _project(cam, pts)
    res = cam["res"]
    mask = (z > 0.05) & (px >= 0) & (px < res) & (py >= 0) & (py < res)
    ix = np.clip(px.astype(np.int64), 0, res - 1)
    iy = np.clip(py.astype(np.int64), 0, res - 1)
    front = buf[iy, ix]
    zbuf = np.where(front > 0, 1.0 / np.maximum(front, 1e-12), np.inf)
    return mask & (z <= zbuf + _depth_bias(recipe, z))


def _box_triangles(center, half):
    c = np.asarray(center, dtype=np.float64)
    h = np.asarray(half, dtype=np.float64)
    corners = c + h * np.array([
        [-1, -1, -1], [1, -1, -1], [1, 1, -1], [-1, 1, -1],
        [-1, -1, 1], [1, -1, 1], [1, 1, 1], [-1, 1, 1],
    ], dtype=np.float64)
    quads = [(0, 1, 2, 3), (4, 7, 6, 5), (0, 4, 5, 1),
             (1, 5, 6, 2), (2, 6, 7, 3), (3, 7, 4, 0)]
    tris = []
    for a, b, cc, d in quads:
        tris.append(corners[[a, b, cc]])
        tris.append(corners[[a, cc, d]])
    return np.asarray(tris)


def _sample_occluders(recipe: ScanRecipe, rng, scene_center):
    if recipe.occluders is not None:
        return [(np.asarray(c, dtype=np.float64), np.asarray(h, dtype=np.float64))
                for c, h in recipe.occluders]
    eye = np.asarray(recipe.camera_position, dtype=np.float64)
    boxes = []
    for _ in range(recipe.occluder_count):
        frac = rng.uniform(0.35, 0.65)
        center = eye + frac * (scene_center - eye)
        lateral = rng.uniform(-0.7, 0.7)
        view = scene_center - eye
        view[2] = 0.0
        view /= max(np.linalg.norm(view), 1e-9)
        side = np.array([-view[1], view[0], 0.0])
        center = center + lateral * side
        center[2] = rng.uniform(0.3, 1.4)
        half = rng.uniform(recipe.occluder_size_min, recipe.occluder_size_max,
                           3) / 2.0
        boxes.append((center, half))
    return boxes


def _surface_samples(verts, faces, rng, samples_per_m2):
    """Area-weighted triangle sampling; returns (points, face indices)."""
    a = verts[faces[:, 0]]
    b = verts[faces[:, 1]]
    c = verts[faces[:, 2]]
    cross = np.cross(b - a, c - a)
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    total = areas.sum()
    count = int(round(samples_per_m2 * total))
    if count == 0:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    fidx = rng.choice(len(faces), size=count, p=areas / total)
    uv = rng.random((count, 2))
    flip = uv.sum(axis=1) > 1.0
    uv[flip] = 1.0 - uv[flip]
    pts = a[fidx] + uv[:, :1] * (b[fidx] - a[fidx]) + uv[:, 1:] * (c[fidx] - a[fidx])
    return pts, fidx


def _face_normals(verts, faces):
    a = verts[faces[:, 0]]
    n = np.cross(verts[faces[:, 1]] - a, verts[faces[:, 2]] - a)
    lens = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.maximum(lens, 1e-30)


def _check_camera_outside(recipe, posed_list, template, occluders):
    eye = np.asarray(recipe.camera_position, dtype=np.float64)
    for posed in posed_list:
        for k in range(1, template.num_parts + 1):
            pv = posed[template.vertex_part == k]
            lo = pv.min(axis=0) - 0.02
            hi = pv.max(axis=0) + 0.02
            if np.all(eye >= lo) and np.all(eye <= hi):
                raise ValueError("camera is inside the scene geometry")
    for center, half in occluders:
        if np.all(np.abs(eye - center) <= half + 0.02):
            raise ValueError("camera is inside an occluder")


def _seed_key(seed, salt):
    return (list(seed) if isinstance(seed, (list, tuple)) else [seed]) + [salt]


def render_scan(template: RiggedTemplate, params_list, recipe: ScanRecipe,
                seed=None, stream_seeds=None):
    """Render one labeled single-view scan of the posed humans.

    Surface points are area-weighted samples of each posed mesh, kept when
    camera-facing and unoccluded in the z-buffer (all meshes plus boxy
    occluders). Gaussian noise (clipped at 4 sigma) is applied along the
    camera rays; clutter points (true label 0) fill a box around the
    scene; labels are then corrupted per the recipe rates. The returned
    GroundTruth records everything pre-corruption.

    `stream_seeds` may pin individual RNG streams ("occluders", "surface",
    "noise", "clutter", "corrupt"); render_sequence uses that to share the
    scene furniture and sampling pattern across frames.
    """
    if isinstance(params_list, BodyParams):
        params_list = [params_list]
    base_seed = recipe.seed if seed is None else seed
    streams = stream_seeds or {}
    rng_occ = np.random.default_rng(
        streams.get("occluders", _seed_key(base_seed, 11)))
    rng_surf = np.random.default_rng(
        streams.get("surface", _seed_key(base_seed, 23)))
    rng_noise = np.random.default_rng(
        streams.get("noise", _seed_key(base_seed, 37)))
    rng_clutter = np.random.default_rng(
        streams.get("clutter", _seed_key(base_seed, 53)))

    posed_list = [pose_mesh(template, p) for p in params_list]
    joints_list = [joints_world(template, p) for p in params_list]
    scene_lo = np.min([pv.min(axis=0) for pv in posed_list], axis=0)
    scene_hi = np.max([pv.max(axis=0) for pv in posed_list], axis=0)
    scene_center = 0.5 * (scene_lo + scene_hi)

    occluders = _sample_occluders(recipe, rng_occ, scene_center)
    _check_camera_outside(recipe, posed_list, template, occluders)
    cam = _camera_frame(recipe)

    tris = [pv[template.faces] for pv in posed_list]
    tris += [_box_triangles(c, h) for c, h in occluders]
    buf = _rasterize(cam, np.concatenate(tris, axis=0))

    face_part = template.face_parts()
    pts_all = []
    labels_all = []
    human_all = []
    for h, (params, posed) in enumerate(zip(params_list, posed_list), start=1):
        pts, fidx = _surface_samples(posed, template.faces, rng_surf,
                                     recipe.samples_per_m2)
        normals = _face_normals(posed, template.faces)[fidx]
        to_eye = cam["eye"] - pts
        to_eye /= np.linalg.norm(to_eye, axis=1, keepdims=True)
        facing = np.einsum("ij,ij->i", normals, to_eye) > 0.05
        visible = facing & _visible_mask(recipe, cam, buf, pts)
        pts = pts[visible]
        pts_all.append(pts)
        labels_all.append(face_part[fidx[visible]])
        human_all.append(np.full(pts.shape[0], h, dtype=np.int64))

    points = np.concatenate(pts_all, axis=0)
    labels = np.concatenate(labels_all)
    human_ids = np.concatenate(human_all)
    if points.shape[0] == 0:
        raise ValueError("no surface points survived visibility filtering")

    if recipe.noise_sigma > 0:
        dirs = points - cam["eye"]
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        xi = np.clip(rng_noise.standard_normal(points.shape[0]), -4.0, 4.0)
        points = points + recipe.noise_sigma * xi[:, None] * dirs

    if recipe.clutter_points > 0:
        lo = scene_lo - np.array([0.5, 0.5, 0.0])
        hi = scene_hi + np.array([0.5, 0.5, 0.1])
        lo[2] = 0.0
        clutter = rng_clutter.uniform(lo, hi, (recipe.clutter_points, 3))
        points = np.concatenate([points, clutter], axis=0)
        labels = np.concatenate([labels, np.zeros(recipe.clutter_points,
                                                  dtype=np.int64)])
        human_ids = np.concatenate([human_ids,
                                    np.zeros(recipe.clutter_points,
                                             dtype=np.int64)])

    gt = GroundTruth(
        params=tuple(params_list),
        vertices=tuple(posed_list),
        joints=tuple(joints_list),
        labels=labels.copy(),
        human_ids=human_ids.copy(),
        part_centroids=part_means(points, labels, template.num_parts),
        part_counts=np.bincount(labels, minlength=template.num_parts + 1)[1:],
        seed=int(base_seed) if np.isscalar(base_seed) else base_seed,
    )

    true_cloud = LabeledPointCloud(points, labels, human_ids=human_ids)
    corrupted = corrupt_labels(
        true_cloud, recipe.corruption_rates(),
        streams.get("corrupt", _seed_key(base_seed, 91)),
        num_parts=template.num_parts,
        lr_pairs=left_right_pairs(template.part_names),
    )
    cloud = LabeledPointCloud(points, corrupted, human_ids=human_ids, gt=gt)
    return cloud, gt


def render_sequence(template: RiggedTemplate, motion, recipe: ScanRecipe):
    """Render one scan per frame.

    Seed policy: occluders, clutter, and the surface sampling pattern are
    shared across frames (a fixed sensor grid over a static scene), while
    noise and label corruption draw fresh per-frame streams.
    """
    rng_occ = np.random.default_rng([recipe.seed, 11])
    # Freeze the scene furniture from frame 0's geometry.
    first = motion[0] if not isinstance(motion[0], BodyParams) else [motion[0]]
    posed0 = [pose_mesh(template, p) for p in first]
    lo = np.min([pv.min(axis=0) for pv in posed0], axis=0)
    hi = np.max([pv.max(axis=0) for pv in posed0], axis=0)
    occluders = _sample_occluders(recipe, rng_occ, 0.5 * (lo + hi))
    frozen = replace(recipe, occluders=tuple(
        (tuple(c), tuple(h)) for c, h in occluders
    ))
    out = []
    for i, params in enumerate(motion):
        streams = {
            "surface": [recipe.seed, 23],
            "clutter": [recipe.seed, 53],
            "noise": [recipe.seed, 37, i],
            "corrupt": [recipe.seed, 91, i],
        }
        out.append(render_scan(template, params, frozen,
                               seed=[recipe.seed, 1000 + i],
                               stream_seeds=streams))
    return out


def left_right_pairs(part_names):
    """Derive the left/right counterpart map from part names, matching
    'left_*' with 'right_*' (1-based part ids)."""
    pairs = {}
    index = {name: i + 1 for i, name in enumerate(part_names)}
    for name, i in index.items():
        if name.startswith("left_"):
            other = "right_" + name[5:]
            if other in index:
                pairs[i] = index[other]
                pairs[index[other]] = i
    return pairs
