"""Skinning, capsule SDF, and offset-network checks against slow oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import cKDTree

from attrfield import autodiff as ad
from attrfield import deform as dfm


def single_bone_template(radius=0.1):
    rest = np.array([[0.0, 0.0, 0.0], [0.0, 0.5, 0.0]])
    verts = dfm._capsule_ring_samples(rest[0], rest[1], radius)
    v = len(verts)
    return dfm.TemplateSkeleton(
        joint_names=["root", "tip"], joint_parents=[-1, 0], joint_rest=rest,
        capsule_joints=[[0, 1]], capsule_radii=[radius], vertices=verts,
        vertex_joint=np.zeros(v, dtype=int),
        shape_basis=np.zeros((v, 3, 2)), pose_basis=np.zeros((v, 3, 2)))


# -- knn weights -----------------------------------------------------------------


def test_query_at_vertex_gets_weight_one():
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]])
    got = dfm.knn_weights(verts[2], verts, k=3)
    assert got[0] == (2, 1.0)
    assert sum(w for _, w in got) == pytest.approx(1.0)


def test_inverse_distance_two_neighbors():
    verts = np.array([[1.0, 0, 0], [3.0, 0, 0], [50.0, 0, 0]])
    got = dict(dfm.knn_weights(np.zeros(3), verts, k=2))
    assert got[0] == pytest.approx(0.75)
    assert got[1] == pytest.approx(0.25)


def test_knn_matches_exhaustive_sort():
    rng = np.random.default_rng(0)
    verts = rng.uniform(-1, 1, size=(100, 3))
    for _ in range(20):
        q = rng.uniform(-1, 1, size=3)
        got = dfm.knn_weights(q, verts, k=4)
        d = np.linalg.norm(verts - q, axis=1)
        order = np.argsort(d)[:4]
        assert [i for i, _ in got] == list(order)
        inv = 1.0 / d[order]
        np.testing.assert_allclose([w for _, w in got], inv / inv.sum(), atol=1e-12)


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 10**6))
def test_knn_weights_nonnegative_sum_one(seed):
    rng = np.random.default_rng(seed)
    verts = rng.normal(size=(30, 3))
    got = dfm.knn_weights(rng.normal(size=3), verts, k=4)
    weights = np.array([w for _, w in got])
    assert np.all(weights >= 0)
    assert abs(weights.sum() - 1.0) < 1e-9


# -- skinning --------------------------------------------------------------------


def test_rest_pose_is_identity():
    template = dfm.build_default_template()
    pose = template.rest_pose()
    rng = np.random.default_rng(1)
    lo, hi = template.vertices.min(axis=0), template.vertices.max(axis=0)
    pts = rng.uniform(lo, hi, size=(50, 3))
    out = dfm.observation_to_canonical(pts, pose, template)
    np.testing.assert_allclose(out, pts, atol=1e-6)


def test_single_bone_rigid_rotation():
    template = single_bone_template()
    q = dfm.quat_from_axis_angle([0.0, 0.0, 1.0], 0.7)
    theta = dfm.quat_identity(2)
    theta[0] = q
    pose = dfm.Pose(theta)
    rot = dfm.quat_to_matrix(q)
    rng = np.random.default_rng(2)
    # points near the posed capsule, rigidly attached to the single bone
    base = rng.uniform([-0.2, 0.0, -0.2], [0.2, 0.6, 0.2], size=(20, 3))
    posed_pts = base @ rot.T
    out = dfm.observation_to_canonical(posed_pts, pose, template)
    np.testing.assert_allclose(out, posed_pts @ rot, atol=1e-5)  # rot.T inverse


def test_blended_matrix_homogeneous_row():
    template = dfm.build_default_template()
    theta = dfm.quat_identity(template.n_joints)
    theta[4] = dfm.quat_from_axis_angle([0, 0, 1], 0.8)
    theta[1] = dfm.quat_from_axis_angle([1, 0, 0], -0.3)
    pose = dfm.Pose(theta, beta=[0.4, -0.2])
    rng = np.random.default_rng(3)
    for _ in range(5):
        x = rng.uniform(-0.5, 0.5, size=3)
        m = dfm.blended_homogeneous(x, pose, template)
        np.testing.assert_array_equal(m[3], [0, 0, 0, 1])
        np.testing.assert_allclose(
            m[:3, :3] @ x + m[:3, 3],
            dfm.skinning_transform(x[None], pose, template)[0], atol=1e-12)


def test_degenerate_blend_raises():
    # two bones rotated so their inverse rotations average to a singular matrix
    rest = np.zeros((3, 3))
    verts = np.array([[0.3, 0.0, 0.0], [0.0, 0.3, 0.0]])
    template = dfm.TemplateSkeleton(
        joint_names=["root", "a", "b"], joint_parents=[-1, 0, 0], joint_rest=rest,
        capsule_joints=[[0, 1]], capsule_radii=[0.05], vertices=verts,
        vertex_joint=[1, 2], shape_basis=np.zeros((2, 3, 2)),
        pose_basis=np.zeros((2, 3, 2)))
    theta = dfm.quat_identity(3)
    theta[1] = dfm.quat_from_axis_angle([1, 0, 0], np.pi)
    theta[2] = dfm.quat_from_axis_angle([0, 1, 0], np.pi)
    pose = dfm.Pose(theta)
    with pytest.raises(dfm.DegenerateSkinningError):
        dfm.skinning_transform(np.array([[0.15, 0.15, 0.0]]), pose, template, k=2)


def test_shape_coefficients_move_vertices():
    template = dfm.build_default_template()
    fat = template.posed_vertices(template.rest_pose(beta=[1.0, 0.0]))
    rest = template.posed_vertices(template.rest_pose())
    assert np.max(np.linalg.norm(fat - rest, axis=1)) > 0.05


def test_pose_validation():
    with pytest.raises(ValueError):
        dfm.Pose(np.ones((4, 4)))  # not unit quaternions
    with pytest.raises(ValueError):
        dfm.Pose(dfm.quat_identity(4), beta=[1.0, np.inf])


# -- template SDF -----------------------------------------------------------------


def test_sdf_axis_midpoint_and_surface():
    template = single_bone_template(radius=0.2)
    assert dfm.template_sdf(np.array([0.0, 0.25, 0.0]), template) == pytest.approx(-0.2)
    assert dfm.template_sdf(np.array([0.2, 0.25, 0.0]), template) == pytest.approx(0.0, abs=1e-12)


def dense_surface_samples(template, target=100_000):
    """Near-uniform samples of every capsule surface; returns (points, spacing)."""
    a = template.joint_rest[template.capsule_joints[:, 0]]
    b = template.joint_rest[template.capsule_joints[:, 1]]
    radii = template.capsule_radii
    lengths = np.linalg.norm(b - a, axis=1)
    area = float(np.sum(2 * np.pi * radii * lengths + 4 * np.pi * radii ** 2))
    s = np.sqrt(area / target)
    pts = []
    for p0, p1, r, L in zip(a, b, radii, lengths):
        w = (p1 - p0) / L
        pick = np.array([1.0, 0, 0]) if abs(w[0]) < 0.9 else np.array([0.0, 1, 0])
        u = np.cross(w, pick)
        u /= np.linalg.norm(u)
        v = np.cross(w, u)
        n_axis = max(int(np.ceil(L / s)) + 1, 2)
        n_around = max(int(np.ceil(2 * np.pi * r / s)), 3)
        angles = np.linspace(0, 2 * np.pi, n_around, endpoint=False)
        circle = np.outer(np.cos(angles), u) + np.outer(np.sin(angles), v)
        for t in np.linspace(0.0, L, n_axis):
            pts.append(p0 + t * w + r * circle)
        n_lat = max(int(np.ceil((np.pi / 2) * r / s)), 2)
        for lat in np.linspace(0, np.pi / 2, n_lat + 1)[1:]:
            ring = r * np.cos(lat) * circle
            pts.append(p0 - np.sin(lat) * r * w + ring)
            pts.append(p1 + np.sin(lat) * r * w + ring)
    return np.concatenate(pts, axis=0), s


def test_sdf_matches_sampled_surface_outside():
    template = dfm.build_default_template()
    samples, spacing = dense_surface_samples(template)
    assert len(samples) > 80_000
    tree = cKDTree(samples)
    rng = np.random.default_rng(4)
    pts = rng.uniform(-1, 1, size=(500, 3))
    d = dfm.template_sdf(pts, template)
    outside = pts[d > 0.02]
    sampled = tree.query(outside)[0]
    np.testing.assert_array_less(np.abs(d[d > 0.02] - sampled), 2 * spacing)


def test_sdf_sign_matches_containment():
    template = dfm.build_default_template()
    a = template.joint_rest[template.capsule_joints[:, 0]]
    b = template.joint_rest[template.capsule_joints[:, 1]]
    rng = np.random.default_rng(5)
    pts = rng.uniform([-0.6, -0.95, -0.3], [0.6, 0.8, 0.3], size=(400, 3))
    d = dfm.template_sdf(pts, template)
    for p, dv in zip(pts, d):
        if abs(dv) < 0.01:
            continue
        inside = False
        for p0, p1, r in zip(a, b, template.capsule_radii):
            seg = np.linspace(p0, p1, 400)
            if np.min(np.linalg.norm(seg - p, axis=1)) < r:
                inside = True
                break
        assert inside == (dv < 0)


def test_sdf_gradient_is_unit_off_medial_axis():
    template = dfm.build_default_template()
    rng = np.random.default_rng(6)
    pts = rng.uniform(-1, 1, size=(800, 3))
    d = dfm.template_sdf(pts, template)
    # per-capsule distances to find points clearly owned by one capsule
    a = template.joint_rest[template.capsule_joints[:, 0]]
    b = template.joint_rest[template.capsule_joints[:, 1]]
    axis = b - a
    denom = np.einsum("cj,cj->c", axis, axis)
    rel = pts[:, None, :] - a[None]
    t = np.clip(np.einsum("pcj,cj->pc", rel, axis) / denom, 0, 1)
    per_cap = np.linalg.norm(rel - t[..., None] * axis[None], axis=2) - template.capsule_radii
    two_smallest = np.sort(per_cap, axis=1)[:, :2]
    keep = (d > 0.05) & (two_smallest[:, 1] - two_smallest[:, 0] > 0.02)
    h = 1e-4
    checked = 0
    for p in pts[keep][:200]:
        grad = np.array([
            (dfm.template_sdf(p + h * e, template) - dfm.template_sdf(p - h * e, template))
            / (2 * h)
            for e in np.eye(3)])
        assert abs(np.linalg.norm(grad) - 1.0) < 5e-2
        checked += 1
    assert checked >= 50


# -- non-rigid offsets -------------------------------------------------------------


def test_zero_initialized_offset_is_zero():
    mlp = dfm.NonRigidMLP.build(seed=3)
    template = dfm.build_default_template()
    pose = template.rest_pose()
    pts = np.random.default_rng(7).uniform(-1, 1, size=(10, 3))
    np.testing.assert_array_equal(dfm.nonrigid_offset_many(mlp, pts, pose, 0.5),
                                  np.zeros((10, 3)))


def test_offset_bound_holds_for_random_weights():
    mlp = dfm.NonRigidMLP.build(seed=1, max_offset=0.05)
    rng = np.random.default_rng(8)
    for i in range(3):
        mlp.weights[i] = rng.normal(scale=5.0, size=mlp.weights[i].shape)
        mlp.biases[i] = rng.normal(scale=5.0, size=mlp.biases[i].shape)
    template = dfm.build_default_template()
    pose = dfm.Pose(dfm.quat_identity(template.n_joints), beta=[0.5, -0.5])
    pts = rng.uniform(-2, 2, size=(1000, 3))
    offsets = dfm.nonrigid_offset_many(mlp, pts, pose, 1.0)
    norms = np.linalg.norm(offsets, axis=1)
    assert np.all(norms <= 0.05 + 1e-12)
    assert np.max(norms) > 0.01  # weights this wild should actually move points


def test_offset_deterministic_for_seed():
    rng_a, rng_b = np.random.default_rng(9), np.random.default_rng(9)
    a, b = dfm.NonRigidMLP.build(seed=6), dfm.NonRigidMLP.build(seed=6)
    a.weights[-1] = rng_a.normal(size=a.weights[-1].shape)
    b.weights[-1] = rng_b.normal(size=b.weights[-1].shape)
    template = dfm.build_default_template()
    pose = template.rest_pose()
    pts = np.random.default_rng(10).uniform(-1, 1, size=(20, 3))
    np.testing.assert_array_equal(dfm.nonrigid_offset_many(a, pts, pose, 0.3),
                                  dfm.nonrigid_offset_many(b, pts, pose, 0.3))


def test_canonical_map_adds_offset_to_skinned_point():
    template = dfm.build_default_template()
    theta = dfm.quat_identity(template.n_joints)
    theta[10] = dfm.quat_from_axis_angle([0, 0, 1], 0.4)
    pose = dfm.Pose(theta)
    mlp = dfm.NonRigidMLP.build(seed=2)
    mlp.weights[-1] = np.random.default_rng(11).normal(size=mlp.weights[-1].shape)
    pts = np.random.default_rng(12).uniform(-0.5, 0.5, size=(15, 3))
    skinned = dfm.skinning_transform(pts, pose, template)
    offsets = ad.value(dfm.nonrigid_offset_many(mlp, skinned, pose, 0.7))
    got = dfm.observation_to_canonical(pts, pose, template, mlp=mlp, mask_value=0.7)
    np.testing.assert_allclose(got, skinned + offsets, atol=1e-12)


def test_default_template_is_well_formed():
    template = dfm.build_default_template()
    assert template.n_vertices > 400
    assert np.all(np.abs(template.vertices) <= 1.0)
    assert np.all(template.capsule_radii > 0)
    # head/hat region and feet region both covered by the capsule union
    assert dfm.template_sdf(np.array([0.0, 0.6, 0.0]), template) < 0
    assert dfm.template_sdf(np.array([0.13, -0.85, 0.0]), template) < 0
