"""Parametric articulated body: rest template, kinematic tree, linear blend
skinning, shape blendshapes, and the procedural capsule humanoid used as the
built-in test asset.

Conventions: z is up, +x is the anatomical left of the body, the body faces
+y at rest. Joint rotations are per-joint axis-angle; the root joint's
rotation doubles as the global orientation and global translation is added
after skinning.
"""

from dataclasses import dataclass

import numpy as np

from .geom import axis_angle_to_matrix, axis_angle_jacobian, canonical_axis_angle

PART_NAMES = (
    "head", "torso", "hips",
    "left_upper_arm", "left_lower_arm", "left_hand",
    "right_upper_arm", "right_lower_arm", "right_hand",
    "left_upper_leg", "left_lower_leg", "left_foot",
    "right_upper_leg", "right_lower_leg", "right_foot",
)

JOINT_NAMES = (
    "pelvis", "spine", "neck", "head",
    "left_shoulder", "left_elbow", "left_wrist",
    "right_shoulder", "right_elbow", "right_wrist",
    "left_hip", "left_knee", "left_ankle",
    "right_hip", "right_knee", "right_ankle",
)

# Left/right counterpart part ids of the builtin humanoid (1-based).
LEFT_RIGHT_PART_PAIRS = {4: 7, 7: 4, 5: 8, 8: 5, 6: 9, 9: 6,
                         10: 13, 13: 10, 11: 14, 14: 11, 12: 15, 15: 12}

MAX_SKIN_JOINTS = 4

# Mesh resolution used when no template is specified (CLI, benchmarks).
# Coarser levels are fine for experiments; the nearest-vertex data term
# gains accuracy with vertex density.
DEFAULT_TEMPLATE_SUBDIVISION = 3


@dataclass(frozen=True)
class RiggedTemplate:
    """Rest-pose mesh + kinematic tree + skinning + shape blendshapes.

    skin_joints/skin_weights are dense (V, 4) with zero-weight padding.
    joint_offsets[j] is the rest offset from parent j's position (the root
    offset is its absolute rest position). Parents must be topologically
    ordered (parents[j] < j, root parent = -1).
    """

    rest_vertices: np.ndarray
    faces: np.ndarray
    vertex_part: np.ndarray
    parents: np.ndarray
    joint_offsets: np.ndarray
    skin_joints: np.ndarray
    skin_weights: np.ndarray
    blendshapes: np.ndarray
    num_parts: int
    part_names: tuple = PART_NAMES
    joint_names: tuple = JOINT_NAMES
    joint_limits: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.rest_vertices, dtype=np.float64)
        faces = np.asarray(self.faces, dtype=np.int64)
        part = np.asarray(self.vertex_part, dtype=np.int64)
        parents = np.asarray(self.parents, dtype=np.int64)
        offsets = np.asarray(self.joint_offsets, dtype=np.float64)
        sj = np.asarray(self.skin_joints, dtype=np.int64)
        sw = np.asarray(self.skin_weights, dtype=np.float64)
        shapes = np.asarray(self.blendshapes, dtype=np.float64)

        nv = v.shape[0]
        nj = parents.shape[0]
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError("rest_vertices must be (V, 3)")
        if faces.ndim != 2 or faces.shape[1] != 3:
            raise ValueError("faces must be (F, 3)")
        if faces.size and (faces.min() < 0 or faces.max() >= nv):
            raise ValueError("faces index out of range")
        if part.shape != (nv,):
            raise ValueError("vertex_part must be (V,)")
        k = int(self.num_parts)
        if k < 1:
            raise ValueError("num_parts must be >= 1")
        present = np.unique(part)
        if present.min() < 1 or present.max() > k:
            raise ValueError("vertex parts must lie in 1..num_parts")
        if present.size != k:
            missing = sorted(set(range(1, k + 1)) - set(present.tolist()))
            raise ValueError(f"parts without vertices: {missing}")

        if offsets.shape != (nj, 3):
            raise ValueError("joint_offsets must be (J, 3)")
        roots = np.nonzero(parents < 0)[0]
        if roots.size != 1 or roots[0] != 0:
            raise ValueError("joint tree must have exactly one root at index 0")
        if np.any(parents[1:] >= np.arange(1, nj)):
            raise ValueError("parents must be topologically ordered (parent < child)")

        if sj.shape != (nv, MAX_SKIN_JOINTS) or sw.shape != (nv, MAX_SKIN_JOINTS):
            raise ValueError(f"skin arrays must be (V, {MAX_SKIN_JOINTS})")
        if sj.min() < 0 or sj.max() >= nj:
            raise ValueError("skin joint index out of range")
        if np.any(sw < -1e-12):
            raise ValueError("skin weights must be nonnegative")
        if np.max(np.abs(sw.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("skin weights must sum to 1 within 1e-9")

        if shapes.ndim != 3 or shapes.shape[1:] != (nv, 3):
            raise ValueError("blendshapes must be (B, V, 3)")

        for name, arr in (("rest_vertices", v), ("joint_offsets", offsets),
                          ("skin_weights", sw), ("blendshapes", shapes)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")

        # Rest joint positions: offsets accumulated down the tree.
        rest_joints = np.zeros((nj, 3))
        rest_joints[0] = offsets[0]
        for j in range(1, nj):
            rest_joints[j] = rest_joints[parents[j]] + offsets[j]

        for key, val in (
            ("rest_vertices", v), ("faces", faces), ("vertex_part", part),
            ("parents", parents), ("joint_offsets", offsets),
            ("skin_joints", sj), ("skin_weights", sw), ("blendshapes", shapes),
        ):
            val.setflags(write=False)
            object.__setattr__(self, key, val)
        rest_joints.setflags(write=False)
        object.__setattr__(self, "rest_joints", rest_joints)
        if self.joint_limits is not None:
            lim = np.asarray(self.joint_limits, dtype=np.float64)
            if lim.shape != (nj, 3, 2):
                raise ValueError("joint_limits must be (J, 3, 2)")
            object.__setattr__(self, "joint_limits", lim)

    @property
    def num_vertices(self):
        return self.rest_vertices.shape[0]

    @property
    def num_joints(self):
        return self.parents.shape[0]

    @property
    def num_shapes(self):
        return self.blendshapes.shape[0]

    @property
    def rest_pose(self):
        """The default pose theta_0 (all zeros by construction)."""
        return np.zeros((self.num_joints, 3))

    def face_parts(self):
        """Part id per face (faces never straddle parts by construction)."""
        return self.vertex_part[self.faces[:, 0]]

    def part_vertex_indices(self, k):
        return np.nonzero(self.vertex_part == k)[0]


@dataclass(frozen=True)
class BodyParams:
    """Optimization variables: per-joint axis-angle pose, shape coefficients,
    and global translation. The root joint's rotation is the global
    orientation."""

    theta: np.ndarray
    beta: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        th = np.asarray(self.theta, dtype=np.float64)
        be = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        tr = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if th.ndim != 2 or th.shape[1] != 3:
            raise ValueError("theta must be (J, 3) axis-angle rows")
        for name, arr in (("theta", th), ("beta", be), ("translation", tr)):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite values")
        angles = np.linalg.norm(th, axis=1)
        if np.any(angles > np.pi + 1e-9):
            raise ValueError("per-joint rotation angle must be <= pi (canonical)")
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "beta", be)
        object.__setattr__(self, "translation", tr)

    @classmethod
    def identity(cls, template: RiggedTemplate):
        return cls(np.zeros((template.num_joints, 3)),
                   np.zeros(template.num_shapes), np.zeros(3))

    def replace(self, theta=None, beta=None, translation=None):
        return BodyParams(
            self.theta if theta is None else theta,
            self.beta if beta is None else beta,
            self.translation if translation is None else translation,
        )


def canonicalize_theta(theta):
    """Wrap every joint's axis-angle to the canonical angle <= pi."""
    th = np.asarray(theta, dtype=np.float64)
    return np.stack([canonical_axis_angle(row) for row in th])


def _check_dims(template: RiggedTemplate, theta, beta):
    if theta.shape != (template.num_joints, 3):
        raise ValueError(
            f"theta shape {theta.shape} does not match J={template.num_joints}"
        )
    if beta.shape != (template.num_shapes,):
        raise ValueError(
            f"beta shape {beta.shape} does not match B={template.num_shapes}"
        )


def _forward_kinematics(template: RiggedTemplate, theta):
    """Global joint rotations G (J,3,3) and positions g (J,3), translation
    excluded. Also returns the per-joint local rotations."""
    R = axis_angle_to_matrix(theta)
    nj = template.num_joints
    G = np.empty((nj, 3, 3))
    g = np.empty((nj, 3))
    G[0] = R[0]
    g[0] = template.joint_offsets[0]
    for j in range(1, nj):
        p = template.parents[j]
        G[j] = G[p] @ R[j]
        g[j] = g[p] + G[p] @ template.joint_offsets[j]
    return G, g, R


def _shaped_rest(template: RiggedTemplate, beta):
    x = template.rest_vertices
    if beta.size:
        x = x + np.tensordot(beta, template.blendshapes, axes=(0, 0))
    return x


def pose_forward(template: RiggedTemplate, theta, beta, translation):
    """Skinning forward pass; returns (posed vertices, cache for backward)."""
    theta = np.asarray(theta, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64).reshape(-1)
    translation = np.asarray(translation, dtype=np.float64).reshape(3)
    _check_dims(template, theta, beta)

    G, g, R = _forward_kinematics(template, theta)
    x = _shaped_rest(template, beta)

    sj = template.skin_joints
    sw = template.skin_weights
    # Blended rotation per vertex and the joint-anchored offset terms.
    M = np.einsum("vs,vsij->vij", sw, G[sj])
    b = g - np.einsum("jik,jk->ji", G, template.rest_joints)  # g_j - G_j @ jrest_j
    posed = np.einsum("vij,vj->vi", M, x) + np.einsum("vs,vsi->vi", sw, b[sj])
    posed = posed + translation

    cache = {"G": G, "g": g, "R": R, "x": x, "M": M,
             "theta": theta, "beta": beta}
    return posed, cache


def pose_backward(template: RiggedTemplate, cache, vertex_adjoint):
    """Reverse-mode gradient of sum_i adjoint_i . posed_i w.r.t.
    (theta, beta, translation). `vertex_adjoint` is (V, 3)."""
    W = np.asarray(vertex_adjoint, dtype=np.float64)
    G, R, x = cache["G"], cache["R"], cache["x"]
    sj = template.skin_joints
    sw = template.skin_weights
    nj = template.num_joints
    jrest = template.rest_joints

    grad_t = W.sum(axis=0)

    # Accumulate adjoints of the global joint transforms.
    Gbar = np.zeros((nj, 3, 3))
    gbar = np.zeros((nj, 3))
    rel = x[:, None, :] - jrest[sj]                    # (V, S, 3)
    contrib = sw[:, :, None, None] * W[:, None, :, None] * rel[:, :, None, :]
    np.add.at(Gbar, sj.ravel(), contrib.reshape(-1, 3, 3))
    np.add.at(gbar, sj.ravel(), (sw[..., None] * W[:, None, :]).reshape(-1, 3))

    # Shape gradient through the blended per-vertex rotation.
    if template.num_shapes:
        xbar = np.einsum("vji,vj->vi", cache["M"], W)
        grad_beta = np.einsum("bvi,vi->b", template.blendshapes, xbar)
    else:
        grad_beta = np.zeros(0)

    # Walk the tree leaf-to-root, pushing adjoints to parents.
    Rbar = np.zeros((nj, 3, 3))
    for j in range(nj - 1, 0, -1):
        p = template.parents[j]
        Rbar[j] = G[p].T @ Gbar[j]
        Gbar[p] += Gbar[j] @ R[j].T
        Gbar[p] += np.outer(gbar[j], template.joint_offsets[j])
        gbar[p] += gbar[j]
    Rbar[0] = Gbar[0]

    dR = axis_angle_jacobian(cache["theta"])           # (J, 3, 3, 3)
    grad_theta = np.einsum("jaxy,jxy->ja", dR, Rbar)
    return grad_theta, grad_beta, grad_t


def pose_mesh(template: RiggedTemplate, params: BodyParams):
    """Posed vertices under (theta, beta, translation); deterministic."""
    posed, _ = pose_forward(template, params.theta, params.beta,
                            params.translation)
    return posed


def joints_world(template: RiggedTemplate, params: BodyParams):
    """Forward-kinematics joint origins under params (translation applied)."""
    theta = np.asarray(params.theta, dtype=np.float64)
    _check_dims(template, theta, np.asarray(params.beta, dtype=np.float64))
    _, g, _ = _forward_kinematics(template, theta)
    return g + params.translation


def model_part_centroids(template: RiggedTemplate, params: BodyParams):
    """Per-part unweighted means of the posed vertices, shaped (K, 3)."""
    posed = pose_mesh(template, params)
    return part_means(posed, template.vertex_part, template.num_parts)


def part_means(vertices, vertex_part, num_parts):
    """Unweighted mean position per part id 1..num_parts; rows of parts
    without vertices are NaN."""
    out = np.full((num_parts, 3), np.nan)
    for k in range(1, num_parts + 1):
        mask = vertex_part == k
        if mask.any():
            out[k - 1] = vertices[mask].mean(axis=0)
    return out


# ---------------------------------------------------------------------------
# Procedural capsule humanoid
# ---------------------------------------------------------------------------

_JOINT_POS = np.array([
    [0.00, 0.0, 0.95],   # pelvis
    [0.00, 0.0, 1.15],   # spine
    [0.00, 0.0, 1.45],   # neck
    [0.00, 0.0, 1.55],   # head
    [0.20, 0.0, 1.40],   # left shoulder
    [0.50, 0.0, 1.40],   # left elbow
    [0.78, 0.0, 1.40],   # left wrist
    [-0.20, 0.0, 1.40],  # right shoulder
    [-0.50, 0.0, 1.40],  # right elbow
    [-0.78, 0.0, 1.40],  # right wrist
    [0.10, 0.0, 0.90],   # left hip
    [0.10, 0.0, 0.50],   # left knee
    [0.10, 0.0, 0.10],   # left ankle
    [-0.10, 0.0, 0.90],  # right hip
    [-0.10, 0.0, 0.50],  # right knee
    [-0.10, 0.0, 0.10],  # right ankle
])

_PARENTS = np.array([-1, 0, 1, 2, 1, 4, 5, 1, 7, 8, 0, 10, 11, 0, 13, 14])

# part id -> (axis start, axis end, radius, (joint a, joint b))
# Vertices blend from joint a to joint b along the capsule axis. Axial
# extents are trimmed so adjacent capsules overlap as little as a
# connected body allows; deep overlap makes nearest-vertex part
# boundaries ambiguous.
_CAPSULES = {
    1: ((0.00, 0.0, 1.55), (0.00, 0.0, 1.66), 0.100, (3, 3)),
    2: ((0.00, 0.0, 1.12), (0.00, 0.0, 1.36), 0.145, (1, 2)),
    3: ((-0.10, 0.0, 0.93), (0.10, 0.0, 0.93), 0.100, (0, 0)),
    4: ((0.22, 0.0, 1.40), (0.50, 0.0, 1.40), 0.050, (4, 5)),
    5: ((0.50, 0.0, 1.40), (0.78, 0.0, 1.40), 0.042, (5, 6)),
    6: ((0.78, 0.0, 1.40), (0.92, 0.0, 1.40), 0.045, (6, 6)),
    10: ((0.10, 0.0, 0.88), (0.10, 0.0, 0.50), 0.080, (10, 11)),
    11: ((0.10, 0.0, 0.50), (0.10, 0.0, 0.10), 0.060, (11, 12)),
    12: ((0.10, 0.02, 0.05), (0.10, 0.20, 0.05), 0.050, (12, 12)),
}
_MIRRORED = {7: 4, 8: 5, 9: 6, 13: 10, 14: 11, 15: 12}
_MIRROR_JOINT = {4: 7, 5: 8, 6: 9, 10: 13, 11: 14, 12: 15}

# Per-axis (lo, hi) sampling ranges. Axial (bone-axis) rotations are kept
# tight: on capsule limbs a roll barely changes the surface, so wide rolls
# are unrecoverable from geometry alone. Hip abduction and knee hinge are
# asymmetric so sampled legs neither cross deeply nor bend forward.
_DEFAULT_LIMITS = {
    "pelvis": ((-np.pi, np.pi),) * 3,
    "spine": ((-0.40, 0.40),) * 3,
    "neck": ((-0.45, 0.45),) * 3,
    "head": ((-0.50, 0.50),) * 3,
    "shoulder": ((-0.25, 0.25), (-1.20, 1.20), (-1.20, 1.20)),  # x = arm axis
    "elbow": ((-0.20, 0.20), (-1.50, 1.50), (-1.50, 1.50)),
    "wrist": ((-0.30, 0.30), (-0.40, 0.40), (-0.40, 0.40)),
    "hip": ((-0.90, 0.90), (-0.30, 0.30), (-0.25, 0.25)),       # z = leg axis
    "knee": ((-1.50, 0.10), (-0.20, 0.20), (-0.20, 0.20)),
    "ankle": ((-0.40, 0.40), (-0.40, 0.40), (-0.25, 0.25)),
}


def _capsule_mesh(p0, p1, radius, segments, rings):
    """Capsule surface: cylindrical body with hemispherical caps.

    Returns (vertices, faces, axis_t) with axis_t in [0, 1], the normalized
    axial coordinate used for skin-weight blending (caps clamp to 0/1).
    """
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    az = axis / length
    ref = np.array([0.0, 0.0, 1.0]) if abs(az[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
    ax = np.cross(ref, az)
    ax /= np.linalg.norm(ax)
    ay = np.cross(az, ax)

    cap_rings = max(2, rings // 2)
    body_rings = max(2, rings)
    psi = 2.0 * np.pi * np.arange(segments) / segments
    circle = np.outer(np.cos(psi), ax) + np.outer(np.sin(psi), ay)

    verts = [p0 - radius * az]       # bottom pole
    ring_rows = []
    # bottom hemisphere (excluding pole and equator duplicates)
    for i in range(1, cap_rings + 1):
        phi = 0.5 * np.pi * i / cap_rings   # 0 at pole, pi/2 at equator
        c = p0 - radius * np.cos(phi) * az
        ring_rows.append((c + radius * np.sin(phi) * circle, 0.0))
    # cylinder interior rings
    for i in range(1, body_rings):
        t = i / body_rings
        ring_rows.append((p0 + t * length * az + radius * circle, t))
    # top hemisphere from equator to pole
    for i in range(cap_rings):
        phi = 0.5 * np.pi * (1.0 - i / cap_rings)
        c = p1 + radius * np.cos(phi) * az
        ring_rows.append((c + radius * np.sin(phi) * circle, 1.0))

    axis_t = [0.0]
    for row, t in ring_rows:
        verts.extend(row)
        axis_t.extend([t] * segments)
    verts.append(p1 + radius * az)   # top pole
    axis_t.append(1.0)
    verts = np.asarray(verts)
    axis_t = np.asarray(axis_t)

    faces = []
    nrings = len(ring_rows)
    first = 1
    for s in range(segments):
        faces.append((0, first + (s + 1) % segments, first + s))
    for r in range(nrings - 1):
        a0 = 1 + r * segments
        b0 = 1 + (r + 1) * segments
        for s in range(segments):
            s1 = (s + 1) % segments
            faces.append((a0 + s, a0 + s1, b0 + s))
            faces.append((a0 + s1, b0 + s1, b0 + s))
    top = len(verts) - 1
    last = 1 + (nrings - 1) * segments
    for s in range(segments):
        faces.append((top, last + s, last + (s + 1) % segments))
    return verts, np.asarray(faces, dtype=np.int64), axis_t


def builtin_humanoid(subdivision=0) -> RiggedTemplate:
    """Procedural capsule-limb humanoid: 15 parts, 16 joints, 2 blendshapes
    (height, girth). Bilaterally symmetric at rest; left parts are built and
    right parts are exact x-mirrors."""
    if subdivision < 0:
        raise ValueError("subdivision must be >= 0")
    segments = 8 + 4 * subdivision
    rings = 3 + subdivision

    verts_all = []
    faces_all = []
    part_all = []
    sjoints_all = []
    sweights_all = []
    girth_all = []
    offset = 0
    blend_zone = 0.25  # fraction of the axis over which adjacent bones blend

    for part_id in range(1, 16):
        if part_id in _MIRRORED:
            src = _MIRRORED[part_id]
            p0, p1, radius, (ja, jb) = _CAPSULES[src]
            ja = _MIRROR_JOINT[ja]
            jb = _MIRROR_JOINT[jb]
            mirrored = True
        else:
            p0, p1, radius, (ja, jb) = _CAPSULES[part_id]
            mirrored = False
        # Right-side parts are exact x-mirrors of the generated left ones.
        v, f, t = _capsule_mesh(p0, p1, radius, segments, rings)
        if mirrored:
            v = v * np.array([-1.0, 1.0, 1.0])
            f = f[:, ::-1]
        # Girth displacement: radial offset from the capsule axis.
        a0 = np.asarray(p0, dtype=np.float64)
        a1 = np.asarray(p1, dtype=np.float64)
        if mirrored:
            a0 = a0 * np.array([-1.0, 1.0, 1.0])
            a1 = a1 * np.array([-1.0, 1.0, 1.0])
        axis = a1 - a0
        s = np.clip(((v - a0) @ axis) / (axis @ axis), 0.0, 1.0)
        radial = v - (a0 + s[:, None] * axis)
        girth_all.append(0.25 * radial)

        # Skinning: blend from joint ja to jb over the tail of the axis.
        w_b = np.clip((t - (1.0 - blend_zone)) / blend_zone, 0.0, 1.0) * 0.5 \
            if ja != jb else np.zeros_like(t)
        sj = np.zeros((v.shape[0], MAX_SKIN_JOINTS), dtype=np.int64)
        sw = np.zeros((v.shape[0], MAX_SKIN_JOINTS))
        sj[:, 0] = ja
        sj[:, 1] = jb
        sw[:, 0] = 1.0 - w_b
        sw[:, 1] = w_b

        verts_all.append(v)
        faces_all.append(f + offset)
        part_all.append(np.full(v.shape[0], part_id, dtype=np.int64))
        sjoints_all.append(sj)
        sweights_all.append(sw)
        offset += v.shape[0]

    rest = np.concatenate(verts_all)
    faces = np.concatenate(faces_all)
    part = np.concatenate(part_all)
    sj = np.concatenate(sjoints_all)
    sw = np.concatenate(sweights_all)

    pelvis_z = _JOINT_POS[0, 2]
    height_shape = np.zeros_like(rest)
    height_shape[:, 2] = 0.12 * (rest[:, 2] - pelvis_z)
    girth_shape = np.concatenate(girth_all)
    blendshapes = np.stack([height_shape, girth_shape])

    offsets = _JOINT_POS.copy()
    offsets[1:] = _JOINT_POS[1:] - _JOINT_POS[_PARENTS[1:]]

    limit_keys = ("pelvis", "spine", "neck", "head",
                  "shoulder", "elbow", "wrist", "shoulder", "elbow", "wrist",
                  "hip", "knee", "ankle", "hip", "knee", "ankle")
    limits = np.zeros((16, 3, 2))
    for j, key in enumerate(limit_keys):
        limits[j] = np.asarray(_DEFAULT_LIMITS[key])

    return RiggedTemplate(
        rest_vertices=rest, faces=faces, vertex_part=part,
        parents=_PARENTS, joint_offsets=offsets,
        skin_joints=sj, skin_weights=sw, blendshapes=blendshapes,
        num_parts=15, joint_limits=limits,
    )
