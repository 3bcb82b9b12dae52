"""Scene container format, synthetic oracle scenes, and attribute exchange.

A scene bundles everything a render needs: the field, the index/decoder/offset
networks, the capsule template, the catalog with its per-attribute boxes, and
render defaults. Files use the ATTRSCN1 layout: magic, version, length-prefixed
sections, trailing CRC32. Editing swaps one attribute's contracted contribution
between scenes without touching either source.
"""

from __future__ import annotations

import configparser
import struct
import zlib

import numpy as np

from . import autodiff as ad
from . import field as fld
from .deform import (DEFAULT_MAX_OFFSET, NonRigidMLP, TemplateSkeleton,
                     build_default_template)
from .indexing import (DEFAULT_ATTRIBUTES, AttributeCatalog, IndexerMLP,
                       index_forward, index_vectors)
from .render import DEFAULT_BETA, DecoderMLP, WHITE
from .sampling import DEFAULT_FAR, DEFAULT_NEAR, DEFAULT_SAMPLES_PER_RAY, \
    AttributeBBox, default_bboxes

SCENE_MAGIC = b"ATTRSCN1"
SCENE_VERSION = 1
DEFAULT_RESOLUTION = 128


class SceneFormatError(ValueError):
    """Base class for unreadable scene files."""


class BadMagicError(SceneFormatError):
    pass


class BadVersionError(SceneFormatError):
    pass


class BadChecksumError(SceneFormatError):
    pass


class CatalogMismatchError(ValueError):
    """Edit between scenes whose attribute catalogs differ."""


class Scene:
    """Immutable bundle of field, networks, template, catalog, and defaults."""

    def __init__(self, field, indexer, decoder, nonrigid, template, catalog,
                 bboxes, beta=DEFAULT_BETA, background=None, resolution=DEFAULT_RESOLUTION,
                 near=DEFAULT_NEAR, far=DEFAULT_FAR,
                 samples_per_ray=DEFAULT_SAMPLES_PER_RAY, active=None,
                 overrides=None):
        n = len(catalog)
        if indexer.in_dim != n:
            raise ValueError("indexer width must match the catalog size")
        if sorted(bboxes) != list(range(n)):
            raise ValueError("need exactly one bbox per catalog label")
        if field.a_dim != indexer.out_dim:
            raise ValueError("index vectors must match the field's A axis")
        if decoder.trunk_weights[0].shape[0] != field.feature_dim:
            raise ValueError("decoder input must match the field feature dim")
        self.field = field
        self.indexer = indexer
        self.decoder = decoder
        self.nonrigid = nonrigid
        self.template = template
        self.catalog = catalog
        self.bboxes = dict(bboxes)
        self.beta = float(beta)
        self.background = np.ones(3) if background is None else \
            np.asarray(background, dtype=np.float64)
        self.resolution = int(resolution)
        self.near = float(near)
        self.far = float(far)
        self.samples_per_ray = int(samples_per_ray)
        self.active = None if active is None else tuple(int(a) for a in active)
        self.overrides = dict(overrides) if overrides else None

    def replaced(self, **kw) -> "Scene":
        """Copy sharing components, with named fields swapped out."""
        base = dict(field=self.field, indexer=self.indexer, decoder=self.decoder,
                    nonrigid=self.nonrigid, template=self.template,
                    catalog=self.catalog, bboxes=self.bboxes, beta=self.beta,
                    background=self.background, resolution=self.resolution,
                    near=self.near, far=self.far,
                    samples_per_ray=self.samples_per_ray, active=self.active,
                    overrides=self.overrides)
        base.update(kw)
        return Scene(**base)


def make_scene(seed: int = 0, catalog=None, spatial_res=fld.DEFAULT_RES,
               a_dim=fld.DEFAULT_A_DIM, ranks=fld.DEFAULT_RANKS,
               feature_dim=fld.DEFAULT_FEATURES, plane_scale=0.1, bboxes=None,
               **defaults) -> Scene:
    """Fresh trainable scene with seeded parameters and stock boxes."""
    catalog = AttributeCatalog() if catalog is None else catalog
    return Scene(
        field=fld.make_field(spatial_res, a_dim, ranks, feature_dim, seed=seed,
                             plane_scale=plane_scale),
        indexer=IndexerMLP.build(len(catalog), a_dim, seed=seed + 1),
        decoder=DecoderMLP.build(feature_dim, seed=seed + 2),
        nonrigid=NonRigidMLP.build(seed=seed + 3),
        template=build_default_template(),
        catalog=catalog,
        bboxes=default_bboxes(catalog) if bboxes is None else bboxes,
        **defaults)


# -- binary container ----------------------------------------------------------------


class _Writer:
    def __init__(self):
        self.parts = []

    def u32(self, v):
        self.parts.append(struct.pack("<I", int(v)))

    def i32s(self, arr):
        self.parts.append(np.asarray(arr, dtype="<i4").tobytes())

    def f32s(self, arr):
        self.parts.append(np.asarray(ad.value(arr), dtype="<f4").tobytes())

    def f64s(self, arr):
        self.parts.append(np.asarray(ad.value(arr), dtype="<f8").tobytes())

    def text(self, s):
        raw = s.encode("utf-8")
        self.u32(len(raw))
        self.parts.append(raw)

    def blob(self):
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise SceneFormatError("section runs past its end")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def i32s(self, shape):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<i4").astype(np.int64) \
            .reshape(shape)

    def f32s(self, shape):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(4 * n), dtype="<f4").astype(np.float64) \
            .reshape(shape)

    def f64s(self, shape):
        n = int(np.prod(shape))
        return np.frombuffer(self.take(8 * n), dtype="<f8").reshape(shape).copy()

    def text(self):
        return self.take(self.u32()).decode("utf-8")


def _write_mlp(w: _Writer, weights, biases):
    w.u32(len(weights))
    for wt, b in zip(weights, biases):
        wt = ad.value(wt)
        w.u32(wt.shape[0])
        w.u32(wt.shape[1])
        w.f64s(wt)
        w.f64s(b)


def _read_mlp(r: _Reader):
    weights, biases = [], []
    for _ in range(r.u32()):
        fan_in, fan_out = r.u32(), r.u32()
        weights.append(r.f64s((fan_in, fan_out)))
        biases.append(r.f64s((fan_out,)))
    return weights, biases


def _sections(scene: Scene):
    w = _Writer()  # catalog
    w.u32(len(scene.catalog))
    for name in scene.catalog:
        w.text(name)
    yield w.blob()

    f = scene.field
    w = _Writer()  # dims
    res = ad.value(f.plane_xy.data).shape[0]
    for v in (res, f.a_dim, *f.ranks, f.feature_dim):
        w.u32(v)
    yield w.blob()

    w = _Writer()  # plane + mix tensors, float32 little-endian row-major
    for plane in (f.plane_xy, f.plane_xz, f.plane_yz,
                  f.plane_za, f.plane_ya, f.plane_xa):
        w.f32s(plane.data)
    for mix in (f.mix_1, f.mix_2, f.mix_3):
        w.f32s(mix)
    yield w.blob()

    for mlp in (scene.indexer, scene.decoder, scene.nonrigid):
        w = _Writer()
        if isinstance(mlp, DecoderMLP):
            w.u32(mlp.feature_width)
            _write_mlp(w, mlp.trunk_weights, mlp.trunk_biases)
            _write_mlp(w, mlp.head_weights, mlp.head_biases)
        elif isinstance(mlp, NonRigidMLP):
            w.f64s(np.array([mlp.max_offset]))
            _write_mlp(w, mlp.weights, mlp.biases)
        else:
            _write_mlp(w, mlp.weights, mlp.biases)
        yield w.blob()

    t = scene.template
    w = _Writer()  # template
    w.u32(t.n_joints)
    for name in t.joint_names:
        w.text(name)
    w.i32s(t.joint_parents)
    w.f64s(t.joint_rest)
    w.u32(len(t.capsule_radii))
    w.i32s(t.capsule_joints)
    w.f64s(t.capsule_radii)
    w.u32(t.n_vertices)
    w.f64s(t.vertices)
    w.i32s(t.vertex_joint)
    w.u32(t.shape_basis.shape[2])
    w.f64s(t.shape_basis)
    w.u32(t.pose_basis.shape[2])
    w.f64s(t.pose_basis)
    yield w.blob()

    w = _Writer()  # bboxes
    w.u32(len(scene.bboxes))
    for label in sorted(scene.bboxes):
        box = scene.bboxes[label]
        w.u32(label)
        w.f64s(box.lo)
        w.f64s(box.hi)
    yield w.blob()

    w = _Writer()  # render defaults
    w.f64s(np.array([scene.beta, scene.near, scene.far]))
    w.f64s(scene.background)
    w.u32(scene.resolution)
    w.u32(scene.samples_per_ray)
    active = tuple(range(len(scene.catalog))) if scene.active is None \
        else scene.active
    w.u32(len(active))
    for label in active:
        w.u32(label)
    yield w.blob()


def save_scene(scene: Scene, path):
    payload = b"".join(struct.pack("<I", len(s)) + s for s in _sections(scene))
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(SCENE_MAGIC)
        fh.write(struct.pack("<I", SCENE_VERSION))
        fh.write(payload)
        fh.write(struct.pack("<I", crc))


def load_scene(path) -> Scene:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != SCENE_MAGIC:
        raise BadMagicError("not a scene file (bad magic)")
    if len(raw) < 16:
        raise BadChecksumError("file truncated")
    version = struct.unpack("<I", raw[8:12])[0]
    if version != SCENE_VERSION:
        raise BadVersionError(f"unsupported scene version {version}")
    payload, stored = raw[12:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(payload) & 0xFFFFFFFF != stored:
        raise BadChecksumError("checksum mismatch (corrupt or truncated file)")

    outer = _Reader(payload)

    def section():
        return _Reader(outer.take(outer.u32()))

    r = section()
    catalog = AttributeCatalog([r.text() for _ in range(r.u32())])

    r = section()
    res, a_dim, r1, r2, r3, feat = (r.u32() for _ in range(6))

    r = section()
    planes = {}
    for pair, rank in (("XY", r1), ("XZ", r2), ("YZ", r3)):
        planes[pair] = fld.PlaneGrid(pair, r.f32s((res, res, rank)))
    for pair, rank in (("ZA", r1), ("YA", r2), ("XA", r3)):
        planes[pair] = fld.PlaneGrid(pair, r.f32s((res, a_dim, rank)))
    mixes = [r.f32s((rank, feat)) for rank in (r1, r2, r3)]
    field = fld.SpaceAttributeField(
        planes["XY"], planes["YZ"], planes["XZ"],
        planes["XA"], planes["YA"], planes["ZA"], *mixes)

    r = section()
    indexer = IndexerMLP(*_read_mlp(r))

    r = section()
    feature_width = r.u32()
    trunk_w, trunk_b = _read_mlp(r)
    head_w, head_b = _read_mlp(r)
    decoder = DecoderMLP(trunk_w, trunk_b, head_w, head_b, feature_width)

    r = section()
    max_offset = float(r.f64s((1,))[0])
    nonrigid = NonRigidMLP(*_read_mlp(r), max_offset=max_offset)

    r = section()
    n_joints = r.u32()
    joint_names = [r.text() for _ in range(n_joints)]
    parents = r.i32s((n_joints,))
    joint_rest = r.f64s((n_joints, 3))
    n_caps = r.u32()
    capsule_joints = r.i32s((n_caps, 2))
    capsule_radii = r.f64s((n_caps,))
    n_verts = r.u32()
    vertices = r.f64s((n_verts, 3))
    vertex_joint = r.i32s((n_verts,))
    shape_basis = r.f64s((n_verts, 3, r.u32()))
    pose_basis = r.f64s((n_verts, 3, r.u32()))
    template = TemplateSkeleton(joint_names, parents, joint_rest, capsule_joints,
                                capsule_radii, vertices, vertex_joint,
                                shape_basis, pose_basis)

    r = section()
    bboxes = {}
    for _ in range(r.u32()):
        label = r.u32()
        bboxes[label] = AttributeBBox(label, r.f64s((3,)), r.f64s((3,)))

    r = section()
    beta, near, far = r.f64s((3,))
    background = r.f64s((3,))
    resolution = r.u32()
    samples_per_ray = r.u32()
    active = tuple(r.u32() for _ in range(r.u32()))

    return Scene(field, indexer, decoder, nonrigid, template, catalog, bboxes,
                 beta=beta, background=background, resolution=resolution,
                 near=near, far=far, samples_per_ray=samples_per_ray,
                 active=active)


# -- attribute compatibility ---------------------------------------------------------


STYLE_TAGS = ("separates", "onepiece-dress", "onepiece-romper")


class CompatibilityRule:
    """Body-style tags with allowed attribute sets plus symmetric exclusions."""

    def __init__(self, allowed_by_tag: dict, exclusions):
        self.allowed_by_tag = {tag: frozenset(names)
                               for tag, names in allowed_by_tag.items()}
        self.exclusions = frozenset(frozenset(p) for p in exclusions)
        for pair in self.exclusions:
            if len(pair) != 2:
                raise ValueError("exclusions must be unordered pairs")
        for tag, names in self.allowed_by_tag.items():
            if "Body" not in names:
                raise ValueError(f"Body must stay allowed under {tag!r}")
            for pair in self.exclusions:
                if pair <= names:
                    raise ValueError(
                        f"tag {tag!r} allows the excluded pair {sorted(pair)}")

    def forbids(self, name_a: str, name_b: str) -> bool:
        return frozenset((name_a, name_b)) in self.exclusions


def default_rules() -> CompatibilityRule:
    every = set(DEFAULT_ATTRIBUTES)
    return CompatibilityRule(
        allowed_by_tag={
            "separates": every - {"Dress", "Rompers"},
            "onepiece-dress": every - {"Pants", "Skirts", "Rompers"},
            "onepiece-romper": every - {"Pants", "Skirts", "Dress"},
        },
        exclusions=[("Dress", "Pants"), ("Dress", "Skirts"), ("Dress", "Rompers"),
                    ("Rompers", "Pants"), ("Rompers", "Skirts")])


def sample_attribute_set(rng, catalog: AttributeCatalog, rules: CompatibilityRule,
                         n_active: int = 3):
    """Body plus (n_active - 1) compatible attributes, catalog-sorted labels."""
    if not 1 <= n_active <= len(catalog):
        raise ValueError("n_active out of range")
    tag = STYLE_TAGS[int(rng.integers(len(STYLE_TAGS)))]
    pool = sorted(rules.allowed_by_tag[tag] & set(catalog.names))
    pool.remove("Body")
    chosen = {"Body"}
    order = rng.permutation(len(pool))
    for k in order:
        if len(chosen) == n_active:
            break
        name = pool[k]
        if any(rules.forbids(name, have) for have in chosen):
            continue
        chosen.add(name)
    return tuple(sorted(catalog.label(n) for n in chosen))


# -- synthetic oracle scenes ---------------------------------------------------------


def _raised_cosine(nodes, lo, hi):
    center, width = (lo + hi) / 2.0, hi - lo
    out = np.cos(np.pi * (nodes - center) / width) ** 2
    out[(nodes < lo) | (nodes > hi)] = 0.0
    return out


def _rig_orthonormal_indexer(indexer: IndexerMLP, n_labels: int) -> IndexerMLP:
    """Solve the last layer so each label maps to a distinct basis vector."""
    a_dim = indexer.out_dim
    if n_labels > a_dim:
        raise ValueError("cannot rig more orthonormal indexes than A_dim")
    h = np.eye(indexer.in_dim)[:n_labels]
    for wt, b in zip(indexer.weights[:-1], indexer.biases[:-1]):
        h = np.tanh(h @ wt + b)
    targets = np.eye(a_dim)[:n_labels]
    last_w = np.linalg.pinv(h) @ targets
    return IndexerMLP(indexer.weights[:-1] + [last_w],
                      indexer.biases[:-1] + [np.zeros(a_dim)])


def generate_oracle_scene(seed: int, catalog=None, rules=None, n_active: int = 3,
                          spatial_res: int = 16, beta: float = 0.02,
                          samples_per_ray: int = 64):
    """Deterministic frozen fitting target plus its active attribute labels.

    Each active attribute gets one rank channel carrying a separable
    raised-cosine bump over its bbox in the (xy, za) pair; predicted indexes
    are rigged to an orthonormal basis so contraction is crosstalk-free.
    """
    catalog = AttributeCatalog() if catalog is None else catalog
    rules = default_rules() if rules is None else rules
    rng = np.random.default_rng(seed)
    active = sample_attribute_set(rng, catalog, rules, n_active)

    base = make_scene(seed=seed + 10, catalog=catalog, spatial_res=spatial_res,
                      plane_scale=0.0, beta=beta,
                      samples_per_ray=samples_per_ray, active=active)
    indexer = _rig_orthonormal_indexer(base.indexer, len(catalog))
    vecs = ad.value(index_vectors(indexer, len(catalog)))

    field = base.field
    res, a_dim = spatial_res, field.a_dim
    r1 = field.ranks[0]
    nodes = np.linspace(-1.0, 1.0, res)
    plane_xy = np.zeros((res, res, r1))
    plane_za = np.zeros((res, a_dim, r1))
    for slot, label in enumerate(active):
        ch = slot % r1
        box = base.bboxes[label]
        amp = 1.0 + rng.uniform(0.5, 2.0)
        bx = _raised_cosine(nodes, box.lo[0], box.hi[0])
        by = _raised_cosine(nodes, box.lo[1], box.hi[1])
        bz = _raised_cosine(nodes, box.lo[2], box.hi[2])
        plane_xy[:, :, ch] += amp * bx[:, None] * by[None, :]
        plane_za[:, :, ch] += bz[:, None] * vecs[label][None, :]
    field = fld.SpaceAttributeField(
        fld.PlaneGrid("XY", plane_xy), field.plane_yz, field.plane_xz,
        field.plane_xa, field.plane_ya, fld.PlaneGrid("ZA", plane_za),
        field.mix_1, field.mix_2, field.mix_3)

    return base.replaced(field=field, indexer=indexer), active


# -- editing -------------------------------------------------------------------------


class EditSpec:
    """Which attribute to transplant, and from where."""

    def __init__(self, attribute, source_id: str = ""):
        self.attribute = attribute
        self.source_id = str(source_id)


def edit_swap(scene_a: Scene, scene_b: Scene, spec) -> Scene:
    """Composite view of scene_a with one attribute pulled from scene_b."""
    if not isinstance(spec, EditSpec):
        spec = EditSpec(spec)
    if scene_a.catalog.names != scene_b.catalog.names:
        raise CatalogMismatchError("scenes expose different attribute catalogs")
    label = scene_a.catalog.label(spec.attribute) \
        if isinstance(spec.attribute, str) else int(spec.attribute)
    if not 0 <= label < len(scene_a.catalog):
        raise ValueError(f"label {label} outside catalog")
    # must run through the exact same ops the renderer uses, so that a
    # self-swap stays bit-identical to the unedited render
    vec = ad.value(index_forward(scene_b.indexer, label).vector)
    contribution = fld.contract_attribute(scene_b.field, vec)
    overrides = dict(scene_a.overrides or {})
    overrides[label] = contribution
    return scene_a.replaced(overrides=overrides)


# -- bbox / rules config file --------------------------------------------------------


def write_scene_config(path, bboxes_by_name: dict, rules: CompatibilityRule):
    """Human-editable INI with [bbox.Name] and [rules.*] sections."""
    cp = configparser.ConfigParser()
    for name, (lo, hi) in sorted(bboxes_by_name.items()):
        cp[f"bbox.{name}"] = {
            "lo": " ".join(f"{v:g}" for v in lo),
            "hi": " ".join(f"{v:g}" for v in hi),
        }
    for tag, names in sorted(rules.allowed_by_tag.items()):
        cp[f"rules.style.{tag}"] = {"allowed": " ".join(sorted(names))}
    cp["rules.exclude"] = {"pairs": " ".join(
        ":".join(sorted(p)) for p in sorted(map(sorted, rules.exclusions)))}
    with open(path, "w") as fh:
        cp.write(fh)


def load_scene_config(path):
    """Parse and validate the INI config; returns (bboxes_by_name, rules)."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    bboxes = {}
    allowed = {}
    exclusions = []
    for section in cp.sections():
        if section.startswith("bbox."):
            name = section[len("bbox."):]
            lo = np.array([float(v) for v in cp[section]["lo"].split()])
            hi = np.array([float(v) for v in cp[section]["hi"].split()])
            if lo.shape != (3,) or hi.shape != (3,):
                raise ValueError(f"bbox {name!r} needs 3 values per corner")
            bboxes[name] = (lo, hi)
        elif section.startswith("rules.style."):
            tag = section[len("rules.style."):]
            allowed[tag] = set(cp[section]["allowed"].split())
        elif section == "rules.exclude":
            for pair in cp[section]["pairs"].split():
                a, _, b = pair.partition(":")
                if not b:
                    raise ValueError(f"malformed exclusion pair {pair!r}")
                exclusions.append((a, b))
        else:
            raise ValueError(f"unknown config section {section!r}")
    return bboxes, CompatibilityRule(allowed, exclusions)
