"""Container round trips, compatibility sampling, oracle scenes, and edits."""

import numpy as np
import pytest

from attrfield import autodiff as ad
from attrfield.field import eval_attribute_many, contract_attribute
from attrfield.indexing import AttributeCatalog, IndexerMLP, cosine_matrix, index_vectors
from attrfield.render import render_image
from attrfield.sampling import Camera, generate_rays, ray_box_intersect
from attrfield.sceneio import (BadChecksumError, BadMagicError, BadVersionError,
                               CatalogMismatchError, CompatibilityRule, EditSpec,
                               Scene, default_rules, edit_swap,
                               generate_oracle_scene, load_scene,
                               load_scene_config, make_scene, sample_attribute_set,
                               save_scene, write_scene_config)


def cam(res=32, dist=3.0):
    return Camera((0.0, 0.0, dist), (0.0, 0.0, 0.0), (0.0, 1.0, 0.0),
                  fov=0.85, width=res, height=res)


# -- scene construction ---------------------------------------------------------------


def test_make_scene_shape_checks():
    scene = make_scene(seed=1)
    assert len(scene.catalog) == 11
    assert sorted(scene.bboxes) == list(range(11))
    assert scene.field.a_dim == scene.indexer.out_dim


def test_scene_rejects_mismatched_components():
    scene = make_scene(seed=1)
    with pytest.raises(ValueError):
        scene.replaced(indexer=IndexerMLP.build(5, a_dim=16))
    with pytest.raises(ValueError):
        scene.replaced(bboxes={k: v for k, v in scene.bboxes.items() if k != 3})
    with pytest.raises(ValueError):
        scene.replaced(indexer=IndexerMLP.build(11, a_dim=8))


# -- container ------------------------------------------------------------------------


def _assert_scene_equal(a: Scene, b: Scene):
    f, g = a.field, b.field
    for name in ("plane_xy", "plane_xz", "plane_yz", "plane_za", "plane_ya",
                 "plane_xa"):
        assert np.array_equal(ad.value(getattr(f, name).data),
                              ad.value(getattr(g, name).data)), name
    for name in ("mix_1", "mix_2", "mix_3"):
        assert np.array_equal(getattr(f, name), getattr(g, name))
    for wa, wb in zip(a.indexer.weights + a.indexer.biases,
                      b.indexer.weights + b.indexer.biases):
        assert np.array_equal(ad.value(wa), ad.value(wb))
    for wa, wb in zip(a.decoder.parameters(), b.decoder.parameters()):
        assert np.array_equal(ad.value(wa), ad.value(wb))
    assert a.decoder.feature_width == b.decoder.feature_width
    for wa, wb in zip(a.nonrigid.weights + a.nonrigid.biases,
                      b.nonrigid.weights + b.nonrigid.biases):
        assert np.array_equal(ad.value(wa), ad.value(wb))
    assert a.nonrigid.max_offset == b.nonrigid.max_offset
    ta, tb = a.template, b.template
    assert ta.joint_names == tb.joint_names
    for name in ("joint_parents", "joint_rest", "capsule_joints", "capsule_radii",
                 "vertices", "vertex_joint", "shape_basis", "pose_basis"):
        assert np.array_equal(getattr(ta, name), getattr(tb, name)), name
    assert a.catalog.names == b.catalog.names
    for label in a.bboxes:
        assert np.array_equal(a.bboxes[label].lo, b.bboxes[label].lo)
        assert np.array_equal(a.bboxes[label].hi, b.bboxes[label].hi)
    assert (a.beta, a.near, a.far) == (b.beta, b.near, b.far)
    assert np.array_equal(a.background, b.background)
    assert (a.resolution, a.samples_per_ray) == (b.resolution, b.samples_per_ray)


def test_save_load_round_trip_bit_exact(tmp_path):
    scene = make_scene(seed=7, active=(0, 5, 8))
    path = tmp_path / "scene.attrscn"
    save_scene(scene, path)
    loaded = load_scene(path)
    _assert_scene_equal(scene, loaded)
    assert loaded.active == (0, 5, 8)


def test_save_load_defaults_all_active(tmp_path):
    scene = make_scene(seed=7)
    path = tmp_path / "scene.attrscn"
    save_scene(scene, path)
    assert load_scene(path).active == tuple(range(11))


def test_double_save_identical_bytes(tmp_path):
    scene, _ = generate_oracle_scene(seed=5)
    p1, p2 = tmp_path / "a.attrscn", tmp_path / "b.attrscn"
    save_scene(scene, p1)
    save_scene(scene, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_loaded_scene_renders_identically(tmp_path):
    scene, active = generate_oracle_scene(seed=3)
    path = tmp_path / "scene.attrscn"
    save_scene(scene, path)
    loaded = load_scene(path)
    a = render_image(scene, cam(), seed=1)
    b = render_image(loaded, cam(), seed=1)
    assert np.array_equal(a.rgb, b.rgb)
    assert np.array_equal(a.semantic, b.semantic)
    assert np.array_equal(a.depth, b.depth)


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOTASCNE" + b"\0" * 64)
    with pytest.raises(BadMagicError):
        load_scene(path)


def test_load_rejects_bad_version(tmp_path):
    scene = make_scene(seed=0)
    path = tmp_path / "scene.attrscn"
    save_scene(scene, path)
    raw = bytearray(path.read_bytes())
    raw[8:12] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(BadVersionError):
        load_scene(path)


def test_load_rejects_truncation_and_corruption(tmp_path):
    scene = make_scene(seed=0)
    path = tmp_path / "scene.attrscn"
    save_scene(scene, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:len(raw) // 2])
    with pytest.raises(BadChecksumError):
        load_scene(path)
    flipped = bytearray(raw)
    flipped[200] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(BadChecksumError):
        load_scene(path)


# -- compatibility sampling -----------------------------------------------------------


def test_sampled_sets_respect_rules():
    rules = default_rules()
    catalog = AttributeCatalog()
    rng = np.random.default_rng(42)
    body = catalog.label("Body")
    for _ in range(10_000):
        labels = sample_attribute_set(rng, catalog, rules, n_active=4)
        names = [catalog.names[l] for l in labels]
        assert body in labels
        assert len(labels) == 4
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                assert not rules.forbids(a, b), (a, b)


def test_rules_validation():
    with pytest.raises(ValueError):
        CompatibilityRule({"tag": {"Top"}}, [])  # Body missing
    with pytest.raises(ValueError):
        CompatibilityRule({"tag": {"Body", "Dress", "Pants"}},
                          [("Dress", "Pants")])  # allows an excluded pair
    with pytest.raises(ValueError):
        CompatibilityRule({"tag": {"Body"}}, [("Dress",)])  # not a pair


def test_forbids_is_symmetric():
    rules = default_rules()
    assert rules.forbids("Dress", "Pants")
    assert rules.forbids("Pants", "Dress")
    assert not rules.forbids("Top", "Pants")


# -- oracle scenes --------------------------------------------------------------------


def test_oracle_scene_basics():
    scene, active = generate_oracle_scene(seed=11)
    assert len(active) == 3
    assert scene.catalog.label("Body") in active
    assert scene.active == active
    cos = cosine_matrix(ad.value(index_vectors(scene.indexer, len(scene.catalog))))
    off = np.abs(cos - np.eye(len(cos)))
    assert off.max() < 1e-9


def test_oracle_attribute_content_localized():
    scene, active = generate_oracle_scene(seed=11)
    vecs = ad.value(index_vectors(scene.indexer, len(scene.catalog)))
    inactive = [l for l in range(len(scene.catalog)) if l not in active][0]
    pts = np.random.default_rng(0).uniform(-1, 1, (200, 3))
    feats = eval_attribute_many(contract_attribute(scene.field, vecs[inactive]), pts)
    assert np.max(np.abs(ad.value(feats))) < 1e-9
    label = [l for l in active if scene.catalog.names[l] != "Body"][0]
    box = scene.bboxes[label]
    center = ((box.lo + box.hi) / 2.0).reshape(1, 3)
    feats = eval_attribute_many(contract_attribute(scene.field, vecs[label]), center)
    assert np.max(np.abs(ad.value(feats))) > 1e-3


def test_oracle_scene_seeds_differ():
    a, _ = generate_oracle_scene(seed=1)
    b, _ = generate_oracle_scene(seed=2)
    assert not np.array_equal(ad.value(a.field.plane_xy.data),
                              ad.value(b.field.plane_xy.data))


# -- editing --------------------------------------------------------------------------


def test_edit_swap_self_is_identity():
    scene, active = generate_oracle_scene(seed=3)
    edited = edit_swap(scene, scene, "Body")
    a = render_image(scene, cam(), seed=5)
    b = render_image(edited, cam(), seed=5)
    assert np.array_equal(a.rgb, b.rgb)
    assert np.array_equal(a.depth, b.depth)
    assert np.array_equal(a.semantic, b.semantic)


def test_edit_swap_locality_and_effect():
    a, _ = generate_oracle_scene(seed=21, n_active=3)
    b, _ = generate_oracle_scene(seed=22, n_active=3)
    hair = a.catalog.label("Haircut")
    active = tuple(sorted(set(a.active) | {hair}))
    a = a.replaced(active=active)
    edited = edit_swap(a, b, "Haircut")
    base_img = render_image(a, cam(res=40), seed=0)
    edit_img = render_image(edited, cam(res=40), seed=0)

    grid = generate_rays(cam(res=40), a.near, a.far)
    touches = np.zeros(grid.shape, dtype=bool)
    for i in range(grid.shape[0]):
        for j in range(grid.shape[1]):
            touches[i, j] = ray_box_intersect(grid.ray(i, j),
                                              a.bboxes[hair]) is not None
    outside = ~touches
    assert np.array_equal(base_img.rgb[outside], edit_img.rgb[outside])
    assert np.array_equal(base_img.depth[outside], edit_img.depth[outside])


def test_edit_swap_involution():
    a, _ = generate_oracle_scene(seed=31)
    b, _ = generate_oracle_scene(seed=32)
    label = a.catalog.label("Top")
    active = tuple(sorted(set(a.active) | {label}))
    a = a.replaced(active=active)
    edited = edit_swap(a, b, EditSpec("Top"))
    reverted = edit_swap(edited, a, EditSpec("Top"))
    base_img = render_image(a, cam(), seed=9)
    back_img = render_image(reverted, cam(), seed=9)
    assert np.array_equal(base_img.rgb, back_img.rgb)
    assert np.array_equal(base_img.depth, back_img.depth)
    assert np.array_equal(base_img.weights, back_img.weights)


def test_edit_swap_requires_matching_catalogs():
    a, _ = generate_oracle_scene(seed=1)
    other = AttributeCatalog(("Body", "Cape"))
    b = make_scene(seed=2, catalog=other,
                   bboxes={0: a.bboxes[0], 1: a.bboxes[1]})
    with pytest.raises(CatalogMismatchError):
        edit_swap(a, b, 0)


def test_edit_does_not_mutate_sources():
    a, _ = generate_oracle_scene(seed=1)
    b, _ = generate_oracle_scene(seed=2)
    edited = edit_swap(a, b, "Body")
    assert a.overrides is None
    assert b.overrides is None
    assert edited.overrides is not None and len(edited.overrides) == 1


# -- config file ----------------------------------------------------------------------


def test_config_round_trip(tmp_path):
    rules = default_rules()
    boxes = {"Haircut": (np.array([-0.3, 0.5, -0.3]), np.array([0.3, 0.9, 0.3])),
             "Body": (np.array([-1.0, -1.0, -1.0]), np.array([1.0, 1.0, 1.0]))}
    path = tmp_path / "scene.cfg"
    write_scene_config(path, boxes, rules)
    loaded_boxes, loaded_rules = load_scene_config(path)
    assert set(loaded_boxes) == {"Haircut", "Body"}
    np.testing.assert_array_equal(loaded_boxes["Haircut"][0], boxes["Haircut"][0])
    assert loaded_rules.allowed_by_tag == rules.allowed_by_tag
    assert loaded_rules.exclusions == rules.exclusions


def test_config_rejects_unknown_section(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[mystery]\nkey = value\n")
    with pytest.raises(ValueError):
        load_scene_config(path)


def test_config_rejects_malformed_pair(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[rules.style.separates]\nallowed = Body\n"
                    "[rules.exclude]\npairs = DressPants\n")
    with pytest.raises(ValueError):
        load_scene_config(path)
