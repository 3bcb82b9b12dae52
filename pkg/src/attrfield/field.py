"""Factored 4-D space-attribute volume.

The volume D(x, y, z, a) is stored as three plane pairs. Each pair couples a
spatial plane with a spatial-by-attribute plane of the same rank:

    D = (P_xy ⊙ P_za) V1 + (P_xz ⊙ P_ya) V2 + (P_yz ⊙ P_xa) V3

Spatial lookups are bilinear with clamp-to-edge over the unit cube [-1, 1]^3;
the attribute axis is an embedding dimension and is contracted exactly (no
interpolation along A). The V matrices mix rank channels into F features and
are frozen at construction.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

SPATIAL_PAIRS = ("XY", "YZ", "XZ")
ATTR_PAIRS = ("XA", "YA", "ZA")

DEFAULT_RES = 32
DEFAULT_A_DIM = 16
DEFAULT_RANKS = (4, 4, 4)
DEFAULT_FEATURES = 16

# Seed for the frozen mix matrices. Never reseeded: every field built by this
# code shares the same V1/V2/V3 for a given (ranks, feature_dim).
MIX_SEED = 830251


def _require_finite(name, arr):
    if not np.all(np.isfinite(ad.value(arr))):
        raise ValueError(f"{name} contains non-finite entries")


class PlaneGrid:
    """One factor plane: rows x cols x rank channels."""

    def __init__(self, axis_pair: str, data):
        if axis_pair not in SPATIAL_PAIRS + ATTR_PAIRS:
            raise ValueError(f"unknown axis pair {axis_pair!r}")
        raw = ad.value(data)
        if raw.ndim != 3:
            raise ValueError("plane data must be rows x cols x rank")
        if raw.shape[0] < 2 or raw.shape[1] < 2:
            raise ValueError("plane needs at least 2 nodes per axis")
        _require_finite(f"plane {axis_pair}", raw)
        self.axis_pair = axis_pair
        self.data = data if isinstance(data, ad.Tensor) else np.asarray(data)

    @property
    def resolution(self):
        shape = ad.value(self.data).shape
        return (shape[0], shape[1])

    @property
    def rank(self) -> int:
        return ad.value(self.data).shape[2]


class SpaceAttributeField:
    """Six planes plus frozen mix matrices; rank-paired as (xy,za), (xz,ya), (yz,xa)."""

    def __init__(self, plane_xy, plane_yz, plane_xz, plane_xa, plane_ya, plane_za,
                 mix_1, mix_2, mix_3):
        pairs = [(plane_xy, plane_za, mix_1), (plane_xz, plane_ya, mix_2),
                 (plane_yz, plane_xa, mix_3)]
        feature_dims = set()
        for spatial, attr, mix in pairs:
            if spatial.rank != attr.rank:
                raise ValueError("paired planes must share a rank")
            mix = np.asarray(mix)
            if mix.shape[0] != spatial.rank:
                raise ValueError("mix matrix rows must equal the pair rank")
            feature_dims.add(mix.shape[1])
        if len(feature_dims) != 1:
            raise ValueError("all mix matrices must share one feature dim")
        a_dims = {plane_xa.resolution[1], plane_ya.resolution[1], plane_za.resolution[1]}
        if len(a_dims) != 1:
            raise ValueError("attribute planes must share A_dim")
        self.plane_xy = plane_xy
        self.plane_yz = plane_yz
        self.plane_xz = plane_xz
        self.plane_xa = plane_xa
        self.plane_ya = plane_ya
        self.plane_za = plane_za
        self.mix_1 = np.asarray(mix_1)
        self.mix_2 = np.asarray(mix_2)
        self.mix_3 = np.asarray(mix_3)

    @property
    def feature_dim(self) -> int:
        return self.mix_1.shape[1]

    @property
    def a_dim(self) -> int:
        return self.plane_za.resolution[1]

    @property
    def ranks(self):
        return (self.plane_xy.rank, self.plane_xz.rank, self.plane_yz.rank)

    def spatial_planes(self):
        return (self.plane_xy, self.plane_xz, self.plane_yz)

    def attr_planes(self):
        return (self.plane_xa, self.plane_ya, self.plane_za)


def frozen_mix_matrices(ranks=DEFAULT_RANKS, feature_dim=DEFAULT_FEATURES):
    """The constant V matrices; same seed for every field ever built."""
    rng = np.random.default_rng(MIX_SEED)
    out = []
    for r in ranks:
        m = rng.standard_normal((r, feature_dim), dtype=np.float32)
        out.append((m / np.float32(np.sqrt(r))).astype(np.float64))
    return tuple(out)


def make_field(spatial_res=DEFAULT_RES, a_dim=DEFAULT_A_DIM, ranks=DEFAULT_RANKS,
               feature_dim=DEFAULT_FEATURES, seed=0, plane_scale=0.1) -> SpaceAttributeField:
    """Fresh field with seeded Gaussian planes (zeros when plane_scale=0)."""
    rng = np.random.default_rng(seed)
    r1, r2, r3 = ranks

    def draw(rows, cols, rank):
        if plane_scale == 0.0:
            return np.zeros((rows, cols, rank))
        # float32 draw upcast to float64: container round-trips stay bit-exact
        m = rng.standard_normal((rows, cols, rank), dtype=np.float32)
        return (m * np.float32(plane_scale)).astype(np.float64)

    mix_1, mix_2, mix_3 = frozen_mix_matrices(ranks, feature_dim)
    return SpaceAttributeField(
        plane_xy=PlaneGrid("XY", draw(spatial_res, spatial_res, r1)),
        plane_yz=PlaneGrid("YZ", draw(spatial_res, spatial_res, r3)),
        plane_xz=PlaneGrid("XZ", draw(spatial_res, spatial_res, r2)),
        plane_xa=PlaneGrid("XA", draw(spatial_res, a_dim, r3)),
        plane_ya=PlaneGrid("YA", draw(spatial_res, a_dim, r2)),
        plane_za=PlaneGrid("ZA", draw(spatial_res, a_dim, r1)),
        mix_1=mix_1, mix_2=mix_2, mix_3=mix_3,
    )


# -- interpolation kernels -----------------------------------------------------


def _grid_coords(u, n: int):
    """Map [-1,1] to node index space [0, n-1] with clamping.

    Returns (lower node index as int array, fractional part). Gradients flow
    through the fraction; outside the cube the clamp zeroes them.
    """
    g = ad.clip((u + 1.0) * (0.5 * (n - 1)), 0.0, float(n - 1))
    gv = ad.value(g)
    i0 = np.minimum(np.floor(gv).astype(np.int64), n - 2)
    return i0, g - i0


def sample_plane_many(data, u, v):
    """Bilinear lookup of a rows x cols x R grid at batched (u, v) in [-1,1]^2."""
    rows, cols = ad.value(data).shape[:2]
    i0, fu = _grid_coords(u, rows)
    j0, fv = _grid_coords(v, cols)
    d00 = data[i0, j0]
    d01 = data[i0, j0 + 1]
    d10 = data[i0 + 1, j0]
    d11 = data[i0 + 1, j0 + 1]
    fu = ad.reshape(fu, (-1, 1))
    fv = ad.reshape(fv, (-1, 1))
    top = d00 * (1.0 - fv) + d01 * fv
    bottom = d10 * (1.0 - fv) + d11 * fv
    return top * (1.0 - fu) + bottom * fu


def sample_profile_many(profile, u):
    """Linear lookup of a rows x R profile along one spatial axis."""
    rows = ad.value(profile).shape[0]
    i0, f = _grid_coords(u, rows)
    f = ad.reshape(f, (-1, 1))
    return profile[i0] * (1.0 - f) + profile[i0 + 1] * f


def sample_plane(plane: PlaneGrid, u: float, v: float):
    """Single-point bilinear lookup; clamps coordinates outside [-1, 1]."""
    out = sample_plane_many(plane.data, np.atleast_1d(np.float64(u)),
                            np.atleast_1d(np.float64(v)))
    return out[0]


def _contract_a(data, a):
    """Contract a rows x A x R plane with an A-vector, giving a rows x R profile."""
    if isinstance(data, ad.Tensor) or isinstance(a, ad.Tensor):
        rows, a_dim, rank = ad.value(data).shape
        flat = ad.reshape(ad.transpose(data, (0, 2, 1)), (rows * rank, a_dim))
        out = ad.matmul(flat, ad.reshape(a, (a_dim, 1)))
        return ad.reshape(out, (rows, rank))
    return np.einsum("sar,a->sr", data, a, optimize=True)


def _check_index_vector(field: SpaceAttributeField, a):
    raw = ad.value(a)
    if raw.ndim != 1 or raw.shape[0] != field.a_dim:
        raise ValueError(f"index vector must have length {field.a_dim}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("index vector contains non-finite entries")


class AttributeContribution:
    """A single attribute's share of the field: spatial planes paired with
    the A-contracted rank profiles, ready for 3-D evaluation."""

    def __init__(self, plane_xy, plane_xz, plane_yz, profile_z, profile_y, profile_x,
                 mix_1, mix_2, mix_3):
        self.plane_xy = plane_xy
        self.plane_xz = plane_xz
        self.plane_yz = plane_yz
        self.profile_z = profile_z
        self.profile_y = profile_y
        self.profile_x = profile_x
        self.mix_1 = mix_1
        self.mix_2 = mix_2
        self.mix_3 = mix_3
        for name, prof in (("z", profile_z), ("y", profile_y), ("x", profile_x)):
            _require_finite(f"profile_{name}", prof)


def contract_attribute(field: SpaceAttributeField, a_i) -> AttributeContribution:
    """Pre-apply one unit index vector along A, fixing the attribute."""
    _check_index_vector(field, a_i)
    norm = float(np.linalg.norm(ad.value(a_i)))
    if abs(norm - 1.0) > 1e-6:
        raise ValueError("index vector must be unit length")
    return AttributeContribution(
        plane_xy=field.plane_xy, plane_xz=field.plane_xz, plane_yz=field.plane_yz,
        profile_z=_contract_a(field.plane_za.data, a_i),
        profile_y=_contract_a(field.plane_ya.data, a_i),
        profile_x=_contract_a(field.plane_xa.data, a_i),
        mix_1=field.mix_1, mix_2=field.mix_2, mix_3=field.mix_3,
    )


def eval_attribute_many(contribution: AttributeContribution, points):
    """Feature vectors (P, F) of one attribute at points (P, 3)."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    c = contribution
    t1 = ad.matmul(sample_plane_many(c.plane_xy.data, x, y)
                   * sample_profile_many(c.profile_z, z), c.mix_1)
    t2 = ad.matmul(sample_plane_many(c.plane_xz.data, x, z)
                   * sample_profile_many(c.profile_y, y), c.mix_2)
    t3 = ad.matmul(sample_plane_many(c.plane_yz.data, y, z)
                   * sample_profile_many(c.profile_x, x), c.mix_3)
    return t1 + t2 + t3


def eval_attribute(contribution: AttributeContribution, x: float, y: float, z: float):
    pts = np.array([[x, y, z]], dtype=np.float64)
    return eval_attribute_many(contribution, pts)[0]


def eval_field_many(field: SpaceAttributeField, points, a):
    """Feature vectors (P, F) at points (P, 3) for index vector a (any norm)."""
    _check_index_vector(field, a)
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    u_z = sample_profile_many(_contract_a(field.plane_za.data, a), z)
    u_y = sample_profile_many(_contract_a(field.plane_ya.data, a), y)
    u_x = sample_profile_many(_contract_a(field.plane_xa.data, a), x)
    t1 = ad.matmul(sample_plane_many(field.plane_xy.data, x, y) * u_z, field.mix_1)
    t2 = ad.matmul(sample_plane_many(field.plane_xz.data, x, z) * u_y, field.mix_2)
    t3 = ad.matmul(sample_plane_many(field.plane_yz.data, y, z) * u_x, field.mix_3)
    return t1 + t2 + t3


def eval_field(field: SpaceAttributeField, x: float, y: float, z: float, a):
    pts = np.array([[x, y, z]], dtype=np.float64)
    return eval_field_many(field, pts, a)[0]


def materialize_dense(field: SpaceAttributeField, grid_res):
    """Brute-force X x Y x Z x A x F tabulation; the test oracle for eval_field.

    The A axis is sampled at the basis vectors e_0 .. e_{A_dim-1}.
    """
    nx, ny, nz = grid_res
    a_dim, f_dim = field.a_dim, field.feature_dim
    if nx * ny * nz * a_dim * f_dim > 10_000_000:
        raise ValueError("dense grid too large to materialize")
    xs = np.linspace(-1.0, 1.0, nx)
    ys = np.linspace(-1.0, 1.0, ny)
    zs = np.linspace(-1.0, 1.0, nz)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    out = np.empty((nx, ny, nz, a_dim, f_dim))
    for k in range(a_dim):
        basis = np.zeros(a_dim)
        basis[k] = 1.0
        vals = ad.value(eval_field_many(field, pts, basis))
        out[:, :, :, k, :] = vals.reshape(nx, ny, nz, f_dim)
    return out
