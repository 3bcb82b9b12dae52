"""Pinhole rays, stratified depths, and per-attribute bounding-box masks."""

from __future__ import annotations

import numpy as np

from .indexing import AttributeCatalog

DEFAULT_NEAR = 0.05
DEFAULT_FAR = 6.0
DEFAULT_SAMPLES_PER_RAY = 64


class Camera:
    """Pinhole camera; fov is the vertical field of view in radians."""

    def __init__(self, position, look_at, up, fov: float, width: int, height: int):
        self.position = np.asarray(position, dtype=np.float64)
        self.look_at = np.asarray(look_at, dtype=np.float64)
        self.up = np.asarray(up, dtype=np.float64)
        self.fov = float(fov)
        self.width = int(width)
        self.height = int(height)
        if not 0.0 < self.fov < np.pi:
            raise ValueError("fov must lie in (0, pi)")
        if self.width < 1 or self.height < 1:
            raise ValueError("image must be at least 1x1")
        forward = self.look_at - self.position
        if np.linalg.norm(forward) < 1e-12:
            raise ValueError("camera position and look-at coincide")
        if np.linalg.norm(np.cross(forward, self.up)) < 1e-9:
            raise ValueError("up vector is parallel to the view direction")

    def basis(self):
        forward = self.look_at - self.position
        forward = forward / np.linalg.norm(forward)
        right = np.cross(forward, self.up)
        right = right / np.linalg.norm(right)
        true_up = np.cross(right, forward)
        return forward, right, true_up


class Ray:
    def __init__(self, origin, direction, near: float = DEFAULT_NEAR,
                 far: float = DEFAULT_FAR):
        self.origin = np.asarray(origin, dtype=np.float64)
        self.direction = np.asarray(direction, dtype=np.float64)
        self.near = float(near)
        self.far = float(far)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not self.near < self.far:
            raise ValueError("need near < far")

    def at(self, t):
        return self.origin + np.outer(np.asarray(t), self.direction).squeeze()


class RayGrid:
    """All pixel rays of one camera: shared origin, (H, W, 3) directions."""

    def __init__(self, origin, directions, near: float, far: float):
        self.origin = origin
        self.directions = directions
        self.near = near
        self.far = far

    @property
    def shape(self):
        return self.directions.shape[:2]

    def ray(self, row: int, col: int) -> Ray:
        return Ray(self.origin, self.directions[row, col], self.near, self.far)


def orbit_camera(yaw: float, pitch: float, dist: float, width: int,
                 height: int | None = None, fov: float = 0.85) -> Camera:
    """Camera on a sphere around the origin; yaw and pitch in radians.

    yaw 0 looks down -z from +z; positive pitch raises the camera.
    """
    if dist <= 0:
        raise ValueError("dist must be positive")
    if abs(pitch) > np.pi / 2 - 1e-3:
        raise ValueError("pitch too close to the pole")
    height = width if height is None else height
    cp = np.cos(pitch)
    position = dist * np.array([np.sin(yaw) * cp, np.sin(pitch),
                                np.cos(yaw) * cp])
    return Camera(position, (0.0, 0.0, 0.0), (0.0, 1.0, 0.0), fov,
                  width, height)


def generate_rays(camera: Camera, near: float = DEFAULT_NEAR,
                  far: float = DEFAULT_FAR) -> RayGrid:
    """One ray through every pixel center."""
    forward, right, true_up = camera.basis()
    half_h = np.tan(camera.fov / 2.0)
    half_w = half_h * camera.width / camera.height
    cols = (np.arange(camera.width) + 0.5) / camera.width * 2.0 - 1.0
    rows = 1.0 - (np.arange(camera.height) + 0.5) / camera.height * 2.0
    dirs = (forward[None, None, :]
            + cols[None, :, None] * half_w * right[None, None, :]
            + rows[:, None, None] * half_h * true_up[None, None, :])
    dirs = dirs / np.linalg.norm(dirs, axis=2, keepdims=True)
    return RayGrid(camera.position.copy(), dirs, near, far)


class AttributeBBox:
    """Axis-aligned attribute extent in canonical space, within [-1,1]^3."""

    def __init__(self, label: int, lo, hi):
        self.label = int(label)
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        if self.lo.shape != (3,) or self.hi.shape != (3,):
            raise ValueError("bbox corners must be 3-vectors")
        if not np.all(self.lo < self.hi):
            raise ValueError("bbox must have positive extent per axis")
        if np.any(self.lo < -1.0) or np.any(self.hi > 1.0):
            raise ValueError("bbox must stay inside [-1,1]^3")

    def contains(self, points) -> np.ndarray:
        pts = np.atleast_2d(points)
        return np.all((pts >= self.lo) & (pts <= self.hi), axis=1)


# Default attribute extents in canonical body coordinates (y up, feet down).
_DEFAULT_BOXES = {
    "Body": ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
    "Haircut": ((-0.38, 0.55, -0.38), (0.38, 0.98, 0.38)),
    "Hats": ((-0.35, 0.62, -0.35), (0.35, 0.95, 0.35)),
    "Glasses": ((-0.28, 0.50, 0.0), (0.28, 0.72, 0.35)),
    "Outer": ((-0.62, -0.15, -0.45), (0.62, 0.55, 0.45)),
    "Top": ((-0.58, -0.05, -0.40), (0.58, 0.52, 0.40)),
    "Skirts": ((-0.50, -0.50, -0.40), (0.50, 0.08, 0.40)),
    "Dress": ((-0.55, -0.55, -0.42), (0.55, 0.52, 0.42)),
    "Pants": ((-0.45, -0.88, -0.35), (0.45, 0.08, 0.35)),
    "Rompers": ((-0.55, -0.60, -0.42), (0.55, 0.52, 0.42)),
    "Shoes": ((-0.50, -1.0, -0.40), (0.50, -0.70, 0.40)),
}


def default_bboxes(catalog: AttributeCatalog) -> dict:
    """Stock per-attribute boxes keyed by catalog label."""
    out = {}
    for label, name in enumerate(catalog):
        if name not in _DEFAULT_BOXES:
            raise KeyError(f"no default bbox for attribute {name!r}")
        lo, hi = _DEFAULT_BOXES[name]
        out[label] = AttributeBBox(label, lo, hi)
    return out


def ray_box_intersect(ray: Ray, box: AttributeBBox):
    """Slab intersection clipped to [near, far]; None on a miss."""
    t_enter, t_exit = ray.near, ray.far
    for axis in range(3):
        o, d = ray.origin[axis], ray.direction[axis]
        lo, hi = box.lo[axis], box.hi[axis]
        if d == 0.0:
            if not lo <= o <= hi:
                return None
            continue
        t1, t2 = (lo - o) / d, (hi - o) / d
        if t1 > t2:
            t1, t2 = t2, t1
        t_enter = max(t_enter, t1)
        t_exit = min(t_exit, t2)
        if t_enter > t_exit:
            return None
    return (t_enter, t_exit)


def stratified_samples(ray: Ray, interval, n: int, rng=None) -> np.ndarray:
    """n depths, one per stratum; midpoints unless a jitter rng is given."""
    t0, t1 = interval
    if not (ray.near <= t0 <= t1 <= ray.far):
        raise ValueError("interval must be a sub-range of [near, far]")
    if n < 1:
        raise ValueError("need at least one sample")
    width = (t1 - t0) / n
    if rng is None:
        offsets = np.full(n, 0.5)
    else:
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        offsets = rng.random(n)
    return t0 + (np.arange(n) + offsets) * width


def attribute_sample_mask(positions, bboxes: dict):
    """Per-attribute containment masks plus the template-only fallback.

    positions: (S, 3) sample points; bboxes: label -> AttributeBBox for the
    active attributes. A sample inside no active box is template-only.
    """
    pts = np.atleast_2d(positions)
    masks = {label: box.contains(pts) for label, box in bboxes.items()}
    if masks:
        any_hit = np.logical_or.reduce(list(masks.values()))
    else:
        any_hit = np.zeros(len(pts), dtype=bool)
    return masks, ~any_hit
