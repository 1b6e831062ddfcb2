"""Core geometry: robust losses, rigid transforms, exact nearest neighbors,
and the part-restricted one-sided Chamfer data term.

All functions are pure and operate on float64 numpy arrays. Points are
(N, 3) arrays in meters; part labels are integer arrays with 0 reserved
for background.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree


class DegenerateGeometryError(ValueError):
    """Raised when a geometric solve is rank-deficient (too few points,
    zero total weight, or a collinear configuration)."""


def _as_points(x, name="points"):
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1 and a.size == 3:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != 3:
        raise ValueError(f"{name} must have shape (N, 3), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


@dataclass(frozen=True)
class LabeledPointCloud:
    """3D points with per-point part labels (0 = background, 1..K = parts).

    `human_ids` optionally tags each point with a human instance id
    (0 for background/clutter). `gt` may carry generator ground truth.
    """

    points: np.ndarray
    labels: np.ndarray
    human_ids: np.ndarray | None = None
    gt: object | None = None

    def __post_init__(self):
        pts = _as_points(self.points, "cloud points")
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.shape != (pts.shape[0],):
            raise ValueError(
                f"labels shape {labels.shape} does not match {pts.shape[0]} points"
            )
        if np.any(labels < 0):
            raise ValueError("labels must be >= 0 (0 = background)")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", labels)
        if self.human_ids is not None:
            hid = np.asarray(self.human_ids, dtype=np.int64)
            if hid.shape != labels.shape:
                raise ValueError("human_ids must match point count")
            object.__setattr__(self, "human_ids", hid)

    def __len__(self):
        return self.points.shape[0]

    def part_ids_present(self):
        """Sorted part ids (> 0) that have at least one point."""
        return np.unique(self.labels[self.labels > 0])


@dataclass(frozen=True)
class RigidTransform:
    """Proper rigid motion x -> R @ x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("non-finite rigid transform")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9:
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must have det +1 within 1e-9")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform"):
        """Transform equivalent to applying `other` first, then self."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self):
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)


# ---------------------------------------------------------------------------
# Robust loss
# ---------------------------------------------------------------------------

def huber(residual_norm, delta):
    """Huber loss of a nonnegative residual norm.

    0.5*r^2 for r <= delta, delta*(r - 0.5*delta) beyond; C1-continuous
    at the threshold. Accepts scalars or arrays.
    """
    r = np.asarray(residual_norm, dtype=np.float64)
    if not np.all(np.isfinite(r)):
        raise ValueError("huber: non-finite residual")
    if np.any(r < 0):
        raise ValueError("huber: residual norm must be >= 0")
    delta = float(delta)
    if not np.isfinite(delta) or delta <= 0:
        raise ValueError("huber: delta must be a positive finite number")
    quad = 0.5 * r * r
    lin = delta * (r - 0.5 * delta)
    out = np.where(r <= delta, quad, lin)
    return float(out) if out.ndim == 0 else out


def huber_grad(residual_norm, delta):
    """d huber / d r: r inside the quadratic zone, delta beyond."""
    r = np.asarray(residual_norm, dtype=np.float64)
    delta = float(delta)
    out = np.where(r <= delta, r, delta)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# Exact nearest-neighbor index
# ---------------------------------------------------------------------------

class NnIndex:
    """Immutable exact nearest-neighbor index over a fixed point set.

    Results are identical to an exhaustive scan; distance ties are broken
    by the lowest original point index. Backed by a kd-tree with a
    tie-correcting ball query on the (rare) ambiguous boundary cases.
    """

    def __init__(self, points):
        pts = _as_points(points)
        if pts.shape[0] == 0:
            raise ValueError("cannot build an index over an empty point set")
        self._points = pts.copy()
        self._points.setflags(write=False)
        self._tree = cKDTree(self._points)

    def __len__(self):
        return self._points.shape[0]

    @property
    def points(self):
        return self._points

    def query(self, queries, k=1):
        """k nearest stored points for each query.

        Returns (indices, distances), each shaped (M, k), rows sorted by
        nondecreasing distance with ties broken by lowest original index.
        """
        q = _as_points(queries, "queries")
        n = len(self)
        k = int(k)
        if k < 1 or k > n:
            raise ValueError(f"k={k} out of range for index of size {n}")

        # One spare neighbor detects ties that straddle the k-boundary; an
        # exact ball query resolves those (rare) rows. Ties fully inside
        # the candidate set are fixed up by the (distance, index) sort.
        kk = min(n, k + 1)
        dist, idx = self._tree.query(q, k=kk)
        if kk == 1:
            dist = dist[:, None]
            idx = idx[:, None]

        order = np.lexsort((idx, dist), axis=1)
        dist = np.take_along_axis(dist, order, axis=1)
        idx = np.take_along_axis(idx, order, axis=1)

        if kk < n:
            ambiguous = np.nonzero(dist[:, k - 1] >= dist[:, kk - 1])[0]
            for row in ambiguous:
                cand = self._tree.query_ball_point(
                    q[row], dist[row, k - 1] * (1 + 1e-12) + 1e-300
                )
                cand = np.asarray(sorted(cand), dtype=np.int64)
                d = np.linalg.norm(self._points[cand] - q[row], axis=1)
                sel = np.lexsort((cand, d))[:k]
                idx[row, :k] = cand[sel]
                dist[row, :k] = d[sel]

        return idx[:, :k].astype(np.int64), dist[:, :k]


def build_index(points) -> NnIndex:
    """Build an immutable exact NN index (errors on an empty list)."""
    return NnIndex(points)


def nearest(index: NnIndex, query, k=1):
    """k exact nearest neighbors of one query point.

    Returns a list of (original index, distance) in nondecreasing
    distance, ties broken by lowest original index.
    """
    idx, dist = index.query(np.asarray(query, dtype=np.float64)[None, :], k=k)
    return [(int(i), float(d)) for i, d in zip(idx[0], dist[0])]


# ---------------------------------------------------------------------------
# Weighted rigid alignment (Kabsch)
# ---------------------------------------------------------------------------

def kabsch(source, target, weights=None) -> RigidTransform:
    """Weighted least-squares rigid alignment source -> target.

    Minimizes sum_i w_i * ||R @ s_i + t - t_i||^2 over proper rotations.
    A reflection solution is corrected by flipping the sign of the
    smallest singular direction. Degenerate input (fewer than 3 pairs,
    zero total weight, or collinear source/target) raises
    DegenerateGeometryError rather than returning a silently bad fit.
    """
    s = _as_points(source, "source")
    t = _as_points(target, "target")
    if s.shape != t.shape:
        raise ValueError("source and target must have the same shape")
    m = s.shape[0]
    if m < 3:
        raise DegenerateGeometryError(f"kabsch needs >= 3 pairs, got {m}")
    if weights is None:
        w = np.ones(m)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (m,):
            raise ValueError("weights must be one scalar per pair")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
    wsum = w.sum()
    if wsum <= 0:
        raise DegenerateGeometryError("kabsch: total weight is zero")

    wn = w / wsum
    s_bar = wn @ s
    t_bar = wn @ t
    s_c = s - s_bar
    t_c = t - t_bar

    # Rank check on the weighted source scatter: a collinear configuration
    # leaves rotation about the line unconstrained.
    scatter = (s_c * wn[:, None]).T @ s_c
    svals = np.linalg.svd(scatter, compute_uv=False)
    if svals[1] <= 1e-12 * max(svals[0], 1e-30):
        raise DegenerateGeometryError(
            "kabsch: source configuration is collinear (rank < 2)"
        )

    H = (s_c * wn[:, None]).T @ t_c
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    if d == 0:
        d = 1.0
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    # Re-orthonormalize to keep the RigidTransform invariants at 1e-9
    # against accumulated SVD roundoff.
    Ru, _, Rvt = np.linalg.svd(R)
    R = Ru @ Rvt
    if np.linalg.det(R) < 0:
        Ru[:, -1] *= -1
        R = Ru @ Rvt
    t_vec = t_bar - R @ s_bar
    return RigidTransform(R, t_vec)


# ---------------------------------------------------------------------------
# Axis-angle rotations and their derivatives
# ---------------------------------------------------------------------------

def _skew(v):
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def axis_angle_to_matrix(omega):
    """Rodrigues map: axis-angle vectors (..., 3) -> rotation matrices (..., 3, 3).

    Series expansions keep the map smooth through the identity.
    """
    w = np.asarray(omega, dtype=np.float64)
    single = w.ndim == 1
    w = np.atleast_2d(w)
    theta2 = np.sum(w * w, axis=1)
    theta = np.sqrt(theta2)
    small = theta < 1e-6
    a = np.empty_like(theta)
    b = np.empty_like(theta)
    a[~small] = np.sin(theta[~small]) / theta[~small]
    b[~small] = (1.0 - np.cos(theta[~small])) / theta2[~small]
    ts = theta2[small]
    a[small] = 1.0 - ts / 6.0 + ts * ts / 120.0
    b[small] = 0.5 - ts / 24.0 + ts * ts / 720.0

    K = np.zeros((w.shape[0], 3, 3))
    K[:, 0, 1] = -w[:, 2]
    K[:, 0, 2] = w[:, 1]
    K[:, 1, 0] = w[:, 2]
    K[:, 1, 2] = -w[:, 0]
    K[:, 2, 0] = -w[:, 1]
    K[:, 2, 1] = w[:, 0]
    K2 = K @ K
    R = np.eye(3)[None] + a[:, None, None] * K + b[:, None, None] * K2
    return R[0] if single else R


def axis_angle_jacobian(omega):
    """Derivative of the Rodrigues map: (..., 3) -> (..., 3, 3, 3).

    Output axis 1 indexes the axis-angle component, so out[j, a] is
    dR/d omega_a for input row j.
    """
    w = np.asarray(omega, dtype=np.float64)
    single = w.ndim == 1
    w = np.atleast_2d(w)
    n = w.shape[0]
    theta2 = np.sum(w * w, axis=1)
    theta = np.sqrt(theta2)
    small = theta < 1e-4

    a = np.empty_like(theta)
    b = np.empty_like(theta)
    c1 = np.empty_like(theta)  # (da/dtheta)/theta
    c2 = np.empty_like(theta)  # (db/dtheta)/theta
    big = ~small
    th = theta[big]
    th2 = theta2[big]
    a[big] = np.sin(th) / th
    b[big] = (1.0 - np.cos(th)) / th2
    c1[big] = (th * np.cos(th) - np.sin(th)) / (th2 * th)
    c2[big] = (th * np.sin(th) - 2.0 * (1.0 - np.cos(th))) / (th2 * th2)
    ts = theta2[small]
    a[small] = 1.0 - ts / 6.0 + ts * ts / 120.0
    b[small] = 0.5 - ts / 24.0 + ts * ts / 720.0
    c1[small] = -1.0 / 3.0 + ts / 30.0 - ts * ts / 840.0
    c2[small] = -1.0 / 12.0 + ts / 180.0 - ts * ts / 6720.0

    K = np.zeros((n, 3, 3))
    K[:, 0, 1] = -w[:, 2]
    K[:, 0, 2] = w[:, 1]
    K[:, 1, 0] = w[:, 2]
    K[:, 1, 2] = -w[:, 0]
    K[:, 2, 0] = -w[:, 1]
    K[:, 2, 1] = w[:, 0]
    K2 = K @ K

    E = np.zeros((3, 3, 3))
    for axis in range(3):
        E[axis] = _skew(np.eye(3)[axis])

    # dR/dw_a = c1*w_a*K + a*E_a + c2*w_a*K^2 + b*(E_a K + K E_a)
    J = (
        c1[:, None, None, None] * w[:, :, None, None] * K[:, None]
        + a[:, None, None, None] * E[None]
        + c2[:, None, None, None] * w[:, :, None, None] * K2[:, None]
        + b[:, None, None, None]
        * (E[None] @ K[:, None] + K[:, None] @ E[None])
    )
    return J[0] if single else J


def matrix_to_axis_angle(R):
    """Inverse Rodrigues map, returning the canonical (angle <= pi) vector."""
    R = np.asarray(R, dtype=np.float64)
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta < 1e-8:
        return np.zeros(3)
    if np.pi - theta < 1e-6:
        # Near pi the off-diagonal extraction is ill-conditioned; use the
        # outer-product form R = 2*nn^T - I + ...
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(A), 0.0, None))
        # Fix signs from the largest component.
        i = int(np.argmax(axis))
        if axis[i] > 0:
            axis = axis * np.sign(A[i] / max(axis[i], 1e-30))
            axis[i] = abs(axis[i])
        nrm = np.linalg.norm(axis)
        if nrm == 0:
            return np.zeros(3)
        return theta * axis / nrm
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * np.sin(theta)) * v


def canonical_axis_angle(omega):
    """Wrap an axis-angle vector so its angle lies in [0, pi]."""
    w = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(w)
    if theta <= np.pi or theta == 0.0:
        return w.copy()
    wrapped = np.mod(theta, 2.0 * np.pi)
    if wrapped > np.pi:
        return w * ((wrapped - 2.0 * np.pi) / theta)
    return w * (wrapped / theta)


# ---------------------------------------------------------------------------
# Part-restricted one-sided Chamfer data term
# ---------------------------------------------------------------------------

def match_plan(cloud: LabeledPointCloud, vertex_labels, restrict_to_parts=True):
    """Precompute the (cloud point group, vertex group) pairing that a
    matching pass needs; labels never change during a fit, so this runs
    once while the per-step query reuses it."""
    vlabels = np.asarray(vertex_labels, dtype=np.int64)
    fg = np.nonzero(cloud.labels > 0)[0]
    if fg.size == 0:
        return []
    if not restrict_to_parts:
        return [(fg, np.arange(vlabels.shape[0]))]
    groups = []
    for k in np.unique(cloud.labels[fg]):
        vk = np.nonzero(vlabels == k)[0]
        if vk.size == 0:
            raise ValueError(
                f"cloud contains part {int(k)} but the model has no vertices "
                f"with that label"
            )
        groups.append((fg[cloud.labels[fg] == k], vk))
    return groups


def match_with_plan(plan, points, vertices):
    """Nearest-vertex correspondences for a precomputed plan.
    Returns (point_indices, vertex_indices) as int64 arrays."""
    if not plan:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    verts = np.asarray(vertices, dtype=np.float64)
    point_idx = []
    vertex_idx = []
    for pk, vk in plan:
        index = NnIndex(verts[vk])
        local, _ = index.query(points[pk], k=1)
        point_idx.append(pk)
        vertex_idx.append(vk[local[:, 0]])
    return np.concatenate(point_idx), np.concatenate(vertex_idx)


def match_to_vertices(cloud: LabeledPointCloud, vertices, vertex_labels,
                      restrict_to_parts=True):
    """Match every non-background cloud point to its nearest model vertex.

    With `restrict_to_parts`, a point labeled k only matches vertices of
    part k (one NN index per part); otherwise the whole mesh is searched.
    Returns (point_indices, vertex_indices) as int64 arrays.
    """
    verts = _as_points(vertices, "vertices")
    plan = match_plan(cloud, vertex_labels, restrict_to_parts)
    return match_with_plan(plan, cloud.points, verts)


def data_term(cloud: LabeledPointCloud, posed_vertices, vertex_labels,
              delta, restrict_to_parts=True):
    """One-sided robust Chamfer distance from labeled points to the mesh.

    Sum over parts k, over cloud points labeled k, of the Huber loss of
    the distance to the nearest part-k vertex. Background points (label 0)
    contribute nothing; model regions without data incur no penalty.
    """
    pidx, vidx = match_to_vertices(cloud, posed_vertices, vertex_labels,
                                   restrict_to_parts)
    if pidx.size == 0:
        return 0.0
    verts = np.asarray(posed_vertices, dtype=np.float64)
    r = np.linalg.norm(cloud.points[pidx] - verts[vidx], axis=1)
    return float(np.sum(huber(r, delta)))
