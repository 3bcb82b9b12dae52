"""Observation-to-canonical deformation over an articulated capsule template.

A small humanoid skeleton carries capsule bones and a few hundred surface
vertices. Posed points are pulled back to canonical space by inverse-distance
blended per-vertex transforms (blend the matrices of the k nearest posed
vertices, then apply once), optionally plus a learned bounded non-rigid
offset. The template also provides the analytic capsule-union SDF d_t.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad

DEFAULT_K = 4
DEFAULT_MAX_OFFSET = 0.05
EMBED_OCTAVES = 4
N_SHAPE_COEFFS = 2
N_POSE_COEFFS = 2
# joints whose rotation feeds the pose-dependent blend shape
POSE_COEFF_JOINTS = (1, 2)


class DegenerateSkinningError(ValueError):
    """Blended skinning matrix is (near) singular."""


# -- quaternions ----------------------------------------------------------------


def quat_identity(n: int) -> np.ndarray:
    q = np.zeros((n, 4))
    q[:, 0] = 1.0
    return q


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


class Pose:
    """Per-joint unit quaternions plus shape coefficients."""

    def __init__(self, theta, beta=None):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.ndim != 2 or theta.shape[1] != 4:
            raise ValueError("theta must be (n_joints, 4) quaternions")
        if not np.all(np.isfinite(theta)):
            raise ValueError("pose rotations must be finite")
        norms = np.linalg.norm(theta, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("pose quaternions must be unit length")
        beta = np.zeros(N_SHAPE_COEFFS) if beta is None else np.asarray(beta, float)
        if beta.shape != (N_SHAPE_COEFFS,) or not np.all(np.isfinite(beta)):
            raise ValueError(f"beta must be {N_SHAPE_COEFFS} finite reals")
        self.theta = theta
        self.beta = beta

    @classmethod
    def rest(cls, n_joints: int, beta=None) -> "Pose":
        return cls(quat_identity(n_joints), beta)

    @property
    def is_rest(self) -> bool:
        return (np.array_equal(self.theta, quat_identity(len(self.theta)))
                and not np.any(self.beta))


def pose_coefficients(pose: Pose) -> np.ndarray:
    """Scalar activation per driver joint; zero at rest."""
    n = len(pose.theta)
    return np.array([1.0 - pose.theta[j, 0] if j < n else 0.0
                     for j in POSE_COEFF_JOINTS])


# -- template -------------------------------------------------------------------


def _translation(p) -> np.ndarray:
    m = np.eye(4)
    m[:3, 3] = p
    return m


class TemplateSkeleton:
    """Joint tree, capsule bones, surface vertices, and blend-shape bases."""

    def __init__(self, joint_names, joint_parents, joint_rest, capsule_joints,
                 capsule_radii, vertices, vertex_joint, shape_basis, pose_basis):
        self.joint_names = list(joint_names)
        self.joint_parents = np.asarray(joint_parents, dtype=np.int64)
        self.joint_rest = np.asarray(joint_rest, dtype=np.float64)
        self.capsule_joints = np.asarray(capsule_joints, dtype=np.int64)
        self.capsule_radii = np.asarray(capsule_radii, dtype=np.float64)
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.vertex_joint = np.asarray(vertex_joint, dtype=np.int64)
        self.shape_basis = np.asarray(shape_basis, dtype=np.float64)
        self.pose_basis = np.asarray(pose_basis, dtype=np.float64)
        self._validate()
        self._rest_inverse = np.stack(
            [_translation(-p) for p in self.joint_rest], axis=0)

    def _validate(self):
        roots = np.flatnonzero(self.joint_parents < 0)
        if len(roots) != 1:
            raise ValueError("joint graph must have exactly one root")
        if np.any(self.joint_parents >= np.arange(len(self.joint_parents))):
            raise ValueError("joints must be ordered parent-before-child")
        if np.any(self.capsule_radii <= 0):
            raise ValueError("capsule radii must be positive")
        if np.any(np.abs(self.vertices) > 1.0):
            raise ValueError("rest vertices must lie inside [-1,1]^3")
        v = len(self.vertices)
        if self.shape_basis.shape != (v, 3, N_SHAPE_COEFFS):
            raise ValueError("shape basis shape mismatch")
        if self.pose_basis.shape != (v, 3, N_POSE_COEFFS):
            raise ValueError("pose basis shape mismatch")

    @property
    def n_joints(self) -> int:
        return len(self.joint_rest)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def rest_pose(self, beta=None) -> Pose:
        return Pose.rest(self.n_joints, beta)

    def global_transforms(self, theta) -> np.ndarray:
        """Forward kinematics: per-joint 4x4 world transforms."""
        out = np.empty((self.n_joints, 4, 4))
        for j in range(self.n_joints):
            parent = self.joint_parents[j]
            offset = self.joint_rest[j] - (self.joint_rest[parent] if parent >= 0
                                           else 0.0)
            local = _translation(offset)
            local[:3, :3] = quat_to_matrix(theta[j])
            out[j] = local if parent < 0 else out[parent] @ local
        return out

    def vertex_matrices(self, pose: Pose) -> np.ndarray:
        """Per-vertex observation transforms M(beta, theta), shape (V, 4, 4)."""
        g = self.global_transforms(pose.theta)
        rigid = g[self.vertex_joint] @ self._rest_inverse[self.vertex_joint]
        disp = (self.shape_basis @ pose.beta
                + self.pose_basis @ pose_coefficients(pose))
        out = rigid.copy()
        out[:, :3, 3] += np.einsum("vij,vj->vi", rigid[:, :3, :3], disp)
        return out

    def posed_vertices(self, pose: Pose) -> np.ndarray:
        m = self.vertex_matrices(pose)
        return np.einsum("vij,vj->vi", m[:, :3, :3], self.vertices) + m[:, :3, 3]


def _capsule_ring_samples(p0, p1, radius, n_rings=6, n_around=8):
    """Deterministic surface samples: rings along the axis plus two poles."""
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    axis = p1 - p0
    length = np.linalg.norm(axis)
    w = axis / length if length > 0 else np.array([0.0, 1.0, 0.0])
    pick = np.array([1.0, 0.0, 0.0]) if abs(w[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = np.cross(w, pick)
    u /= np.linalg.norm(u)
    v = np.cross(w, u)
    pts = []
    for t in np.linspace(0.0, 1.0, n_rings):
        center = p0 + t * (p1 - p0)
        for ang in np.linspace(0.0, 2 * np.pi, n_around, endpoint=False):
            pts.append(center + radius * (np.cos(ang) * u + np.sin(ang) * v))
    pts.append(p0 - radius * w)
    pts.append(p1 + radius * w)
    return np.asarray(pts)


def build_default_template() -> TemplateSkeleton:
    """The stock humanoid: 16 joints, 11 capsules, ~550 surface vertices."""
    joints = [
        ("pelvis", (0.00, 0.00, 0.0), -1),
        ("spine", (0.00, 0.22, 0.0), 0),
        ("neck", (0.00, 0.48, 0.0), 1),
        ("head", (0.00, 0.60, 0.0), 2),
        ("l_shoulder", (0.16, 0.42, 0.0), 1),
        ("l_elbow", (0.34, 0.22, 0.0), 4),
        ("l_wrist", (0.46, 0.02, 0.0), 5),
        ("r_shoulder", (-0.16, 0.42, 0.0), 1),
        ("r_elbow", (-0.34, 0.22, 0.0), 7),
        ("r_wrist", (-0.46, 0.02, 0.0), 8),
        ("l_hip", (0.10, -0.08, 0.0), 0),
        ("l_knee", (0.12, -0.45, 0.0), 10),
        ("l_ankle", (0.13, -0.82, 0.0), 11),
        ("r_hip", (-0.10, -0.08, 0.0), 0),
        ("r_knee", (-0.12, -0.45, 0.0), 13),
        ("r_ankle", (-0.13, -0.82, 0.0), 14),
    ]
    names = [j[0] for j in joints]
    rest = np.array([j[1] for j in joints])
    parents = np.array([j[2] for j in joints])
    # capsules: (proximal joint, distal joint, radius)
    capsules = [
        (0, 1, 0.16), (1, 2, 0.14), (2, 3, 0.11),
        (4, 5, 0.055), (5, 6, 0.045),
        (7, 8, 0.055), (8, 9, 0.045),
        (10, 11, 0.085), (11, 12, 0.07),
        (13, 14, 0.085), (14, 15, 0.07),
    ]
    cap_joints = np.array([(a, b) for a, b, _ in capsules])
    cap_radii = np.array([r for _, _, r in capsules])

    verts, vert_joint = [], []
    for (a, b, r) in capsules:
        pts = _capsule_ring_samples(rest[a], rest[b], r)
        verts.append(pts)
        vert_joint.extend([a] * len(pts))
    vertices = np.concatenate(verts, axis=0)
    vertex_joint = np.array(vert_joint)

    # shape basis: coeff 0 pushes vertices radially off their bone axis,
    # coeff 1 stretches vertically in proportion to height
    v_count = len(vertices)
    shape_basis = np.zeros((v_count, 3, N_SHAPE_COEFFS))
    row = 0
    for (a, b, r) in capsules:
        pts = _capsule_ring_samples(rest[a], rest[b], r)
        axis = rest[b] - rest[a]
        denom = float(axis @ axis)
        for p in pts:
            t = np.clip((p - rest[a]) @ axis / denom, 0.0, 1.0) if denom > 0 else 0.0
            radial = p - (rest[a] + t * axis)
            n = np.linalg.norm(radial)
            shape_basis[row, :, 0] = 0.08 * radial / n if n > 1e-12 else 0.0
            shape_basis[row, 1, 1] = 0.1 * p[1]
            row += 1

    pose_basis = np.zeros((v_count, 3, N_POSE_COEFFS))
    pose_basis[:, :, 0] = 0.02 * np.sin(3.0 * vertices)
    pose_basis[:, 0, 1] = 0.02 * np.cos(2.0 * vertices[:, 1])
    pose_basis[:, 2, 1] = 0.02 * np.sin(2.0 * vertices[:, 1])

    return TemplateSkeleton(names, parents, rest, cap_joints, cap_radii,
                            vertices, vertex_joint, shape_basis, pose_basis)


# -- k-NN skinning ---------------------------------------------------------------

COINCIDENT = 1e-9


def knn_weights(x, posed_vertices, k: int = DEFAULT_K):
    """Inverse-distance weights over the k nearest posed vertices."""
    x = np.asarray(x, dtype=np.float64)
    posed_vertices = np.asarray(posed_vertices, dtype=np.float64)
    if k < 1 or len(posed_vertices) < k:
        raise ValueError("need at least k template vertices")
    d = np.linalg.norm(posed_vertices - x, axis=1)
    ids = np.argsort(d)[:k]
    dists = d[ids]
    if dists[0] < COINCIDENT:
        weights = np.zeros(k)
        weights[0] = 1.0
    else:
        inv = 1.0 / dists
        weights = inv / inv.sum()
    return [(int(i), float(w)) for i, w in zip(ids, weights)]


def _blend_matrices(points, posed_verts, per_vertex, k):
    """Weighted 3x4 blends of per-vertex matrices at each query point."""
    tree = cKDTree(posed_verts)
    dists, ids = tree.query(points, k=k)
    if k == 1:
        dists, ids = dists[:, None], ids[:, None]
    inv = 1.0 / np.maximum(dists, COINCIDENT)
    weights = inv / inv.sum(axis=1, keepdims=True)
    hit = dists[:, 0] < COINCIDENT
    if np.any(hit):
        weights[hit] = 0.0
        weights[hit, 0] = 1.0
    gathered = per_vertex[ids][:, :, :3, :]
    return np.einsum("pk,pkij->pij", weights, gathered), weights


def skinning_transform(points, pose_t: Pose, template: TemplateSkeleton,
                       pose_0: Pose | None = None, k: int = DEFAULT_K):
    """Pure blend-skinning pullback T(x) for a batch of observed points."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    pose_0 = template.rest_pose() if pose_0 is None else pose_0
    m_t = template.vertex_matrices(pose_t)
    m_0 = template.vertex_matrices(pose_0)
    per_vertex = m_0 @ np.linalg.inv(m_t)
    posed = template.posed_vertices(pose_t)
    blended, _ = _blend_matrices(points, posed, per_vertex, k)
    dets = np.linalg.det(blended[:, :, :3])
    if np.any(np.abs(dets) < 1e-9):
        raise DegenerateSkinningError("blended skinning matrix is singular")
    return np.einsum("pij,pj->pi", blended[:, :, :3], points) + blended[:, :, 3]


def blended_homogeneous(x, pose_t: Pose, template: TemplateSkeleton,
                        pose_0: Pose | None = None, k: int = DEFAULT_K):
    """Full 4x4 blended matrix at one point (diagnostics and tests)."""
    x = np.asarray(x, dtype=np.float64)
    pose_0 = template.rest_pose() if pose_0 is None else pose_0
    per_vertex = (template.vertex_matrices(pose_0)
                  @ np.linalg.inv(template.vertex_matrices(pose_t)))
    posed = template.posed_vertices(pose_t)
    blend34, _ = _blend_matrices(x[None, :], posed, per_vertex, k)
    out = np.zeros((4, 4))
    out[:3, :] = blend34[0]
    out[3, 3] = 1.0
    return out


# -- template SDF ----------------------------------------------------------------


def template_sdf(points, template: TemplateSkeleton):
    """Signed distance to the capsule union at rest; negative inside."""
    pts = np.asarray(points)
    if pts.dtype.kind != "f":
        pts = pts.astype(np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    a = template.joint_rest[template.capsule_joints[:, 0]]
    b = template.joint_rest[template.capsule_joints[:, 1]]
    axis = b - a
    denom = np.maximum(np.einsum("cj,cj->c", axis, axis), 1e-30)
    # one capsule at a time keeps the working set at (P, 3) for big batches
    out = None
    for c in range(len(a)):
        rel = pts - a[c].astype(pts.dtype)
        t = np.clip((rel @ axis[c].astype(pts.dtype)) / pts.dtype.type(denom[c]),
                    0.0, 1.0)
        closest = rel - t[:, None] * axis[c].astype(pts.dtype)
        d = np.sqrt(np.einsum("pj,pj->p", closest, closest))
        d -= pts.dtype.type(template.capsule_radii[c])
        out = d if out is None else np.minimum(out, d)
    return out[0] if single else out


# -- non-rigid offset network ------------------------------------------------------


def embed_points(points) -> np.ndarray:
    """Raw coordinates plus sin/cos at octave frequencies."""
    pts = np.atleast_2d(np.asarray(ad.value(points), dtype=np.float64))
    parts = [pts]
    for octave in range(EMBED_OCTAVES):
        f = (2.0 ** octave) * np.pi
        parts.append(np.sin(f * pts))
        parts.append(np.cos(f * pts))
    return np.concatenate(parts, axis=1)


EMBED_DIM = 3 * (1 + 2 * EMBED_OCTAVES)
NONRIGID_IN = EMBED_DIM + N_SHAPE_COEFFS + N_POSE_COEFFS + 1
NONRIGID_HIDDEN = 32


class NonRigidMLP:
    """Bounded per-point offset: tanh output scaled so the norm stays small."""

    def __init__(self, weights, biases, max_offset: float = DEFAULT_MAX_OFFSET):
        if len(weights) != 3 or len(biases) != 3:
            raise ValueError("offset network has exactly 3 layers")
        self.weights = list(weights)
        self.biases = list(biases)
        self.max_offset = float(max_offset)

    @classmethod
    def build(cls, seed: int = 0, max_offset: float = DEFAULT_MAX_OFFSET) -> "NonRigidMLP":
        rng = np.random.default_rng(seed)
        dims = [NONRIGID_IN, NONRIGID_HIDDEN, NONRIGID_HIDDEN, 3]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            w = rng.standard_normal((fan_in, fan_out), dtype=np.float32)
            weights.append((w / np.float32(np.sqrt(fan_in))).astype(np.float64))
            biases.append(np.zeros(fan_out))
        # zero last layer: the offset starts exactly at zero
        weights[-1] = np.zeros_like(weights[-1])
        return cls(weights, biases, max_offset)

    def parameters(self):
        return self.weights + self.biases

    def forward(self, inputs):
        h = inputs
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.matmul(h, w) + b
            if i < 2:
                h = ad.tanh(h)
        # per-component bound max_offset/sqrt(3) keeps the norm under max_offset
        return ad.tanh(h) * (self.max_offset / np.sqrt(3.0))


def nonrigid_offset_many(mlp: NonRigidMLP, points, pose: Pose, mask_value):
    """Offsets (P, 3) for canonical points; mask_value scalar or per-point."""
    emb = embed_points(points)
    n = emb.shape[0]
    mask = np.broadcast_to(np.asarray(mask_value, dtype=np.float64), (n,))
    inputs = np.concatenate([
        emb,
        np.broadcast_to(pose.beta, (n, N_SHAPE_COEFFS)),
        np.broadcast_to(pose_coefficients(pose), (n, N_POSE_COEFFS)),
        mask[:, None],
    ], axis=1)
    return mlp.forward(inputs)


def nonrigid_offset(mlp: NonRigidMLP, x0, pose: Pose, mask_value: float):
    return nonrigid_offset_many(mlp, np.atleast_2d(x0), pose, mask_value)[0]


def observation_to_canonical(x_t, pose_t: Pose, template: TemplateSkeleton,
                             mlp: NonRigidMLP | None = None,
                             mask_value: float = 0.0,
                             pose_0: Pose | None = None,
                             k: int = DEFAULT_K):
    """Map observed point(s) to canonical space: T(x) plus the learned offset.

    The offset network is fed the pre-offset skinned point.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    single = x_t.ndim == 1
    skinned = skinning_transform(x_t, pose_t, template, pose_0=pose_0, k=k)
    if mlp is not None:
        skinned = skinned + ad.value(nonrigid_offset_many(mlp, skinned, pose_t,
                                                          mask_value))
    return skinned[0] if single else skinned
