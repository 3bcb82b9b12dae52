"""Self-distillation fitting: losses, exact gradients, and momentum SGD.

A trainable scene is regressed onto a frozen target scene from its rendered
images. Reconstruction runs through the same ray pipeline as rendering, so
the loss of a scene against itself is exactly zero; the regularizers (eikonal,
surface pull-in, residual-distance and offset penalties, index orthogonality)
are evaluated on uniformly drawn probe points.
"""

from __future__ import annotations

import json
import sys

import numpy as np

from . import autodiff as ad
from . import field as fld
from .deform import NonRigidMLP
from .indexing import IndexerMLP, index_vectors, opr_loss
from .render import (_slab_entry_exit, forward_rays, fused_at_points,
                     resolve_active_labels, scene_contributions)
from .sampling import generate_rays, orbit_camera

LAMBDA_DEFAULTS = dict(recon=1.0, eik=0.1, surf=0.01, rsdf=0.01, nonrig=0.01,
                       orth=1.0)
TERM_ORDER = ("recon", "eik", "surf", "rsdf", "nonrig", "orth")

EIKONAL_H = 1e-3
SURFACE_SHARPNESS = 100.0


class DivergenceError(RuntimeError):
    """Loss or gradient went non-finite."""


class FitConfig:
    """Hyperparameters for one fit run."""

    def __init__(self, lambda_recon=LAMBDA_DEFAULTS["recon"],
                 lambda_eik=LAMBDA_DEFAULTS["eik"],
                 lambda_surf=LAMBDA_DEFAULTS["surf"],
                 lambda_rsdf=LAMBDA_DEFAULTS["rsdf"],
                 lambda_nonrig=LAMBDA_DEFAULTS["nonrig"],
                 lambda_orth=LAMBDA_DEFAULTS["orth"],
                 learning_rate=0.01, momentum=0.9, steps=500,
                 rays_per_step=128, reg_points_per_step=128, seed=0,
                 resolutions=(32, 64)):
        self.lambdas = dict(recon=float(lambda_recon), eik=float(lambda_eik),
                            surf=float(lambda_surf), rsdf=float(lambda_rsdf),
                            nonrig=float(lambda_nonrig), orth=float(lambda_orth))
        for name, lam in self.lambdas.items():
            if not np.isfinite(lam) or lam < 0:
                raise ValueError(f"lambda_{name} must be finite and >= 0")
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.steps = int(steps)
        self.rays_per_step = int(rays_per_step)
        self.reg_points_per_step = int(reg_points_per_step)
        self.seed = int(seed)
        self.resolutions = tuple(int(r) for r in resolutions)
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.rays_per_step < 1 or self.reg_points_per_step < 1:
            raise ValueError("batch sizes must be at least 1")
        if not self.resolutions or any(r < 2 for r in self.resolutions):
            raise ValueError("resolutions must be positive")

    def resolution_at(self, step: int) -> int:
        """Stage schedule: steps split evenly across the resolution list."""
        stage = min(step * len(self.resolutions) // self.steps,
                    len(self.resolutions) - 1)
        return self.resolutions[stage]


class LossReport:
    """Per-step loss record; total is the lambda-weighted sum of the terms."""

    def __init__(self, step: int, terms: dict, total: float):
        self.step = int(step)
        self.terms = dict(terms)
        self.total = float(total)

    def json_line(self) -> str:
        rec = {"step": self.step}
        rec.update({k: self.terms[k] for k in TERM_ORDER})
        rec["total"] = self.total
        return json.dumps(rec)


# -- trainable parameter flattening ---------------------------------------------------


def _component_arrays(scene):
    """(name, array) pairs over everything the fit may move.

    The frozen mix matrices and the body template are deliberately absent.
    """
    f = scene.field
    entries = [("field.plane_xy", f.plane_xy.data),
               ("field.plane_yz", f.plane_yz.data),
               ("field.plane_xz", f.plane_xz.data),
               ("field.plane_xa", f.plane_xa.data),
               ("field.plane_ya", f.plane_ya.data),
               ("field.plane_za", f.plane_za.data)]
    for i, (w, b) in enumerate(zip(scene.indexer.weights, scene.indexer.biases)):
        entries.append((f"indexer.w{i}", w))
        entries.append((f"indexer.b{i}", b))
    dec = scene.decoder
    for i, (w, b) in enumerate(zip(dec.trunk_weights, dec.trunk_biases)):
        entries.append((f"decoder.trunk_w{i}", w))
        entries.append((f"decoder.trunk_b{i}", b))
    for name, w, b in zip(("delta", "mask", "color", "feature"),
                          dec.head_weights, dec.head_biases):
        entries.append((f"decoder.head_{name}_w", w))
        entries.append((f"decoder.head_{name}_b", b))
    for i, (w, b) in enumerate(zip(scene.nonrigid.weights, scene.nonrigid.biases)):
        entries.append((f"nonrigid.w{i}", w))
        entries.append((f"nonrigid.b{i}", b))
    return [(name, np.asarray(ad.value(a), dtype=np.float64))
            for name, a in entries]


class ParameterSet:
    """Flat float64 view over a scene's trainable arrays.

    flatten() and rebuild() are exact inverses; names/slices let errors point
    at the segment that went wrong.
    """

    def __init__(self, scene):
        self.scene = scene
        entries = _component_arrays(scene)
        self.names = [name for name, _ in entries]
        self.shapes = [a.shape for _, a in entries]
        self._arrays = [a for _, a in entries]
        sizes = [a.size for a in self._arrays]
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        self.slices = [slice(int(lo), int(hi))
                       for lo, hi in zip(bounds[:-1], bounds[1:])]
        self.size = int(bounds[-1])

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._arrays])

    def split(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self.size,):
            raise ValueError(f"expected a flat vector of {self.size} values")
        return [values[sl].reshape(shape)
                for sl, shape in zip(self.slices, self.shapes)]

    def segment_of(self, flat_index: int) -> str:
        for name, sl in zip(self.names, self.slices):
            if sl.start <= flat_index < sl.stop:
                return name
        raise IndexError(flat_index)

    def _assemble(self, parts):
        by_name = dict(zip(self.names, parts))
        f = self.scene.field
        field = fld.SpaceAttributeField(
            plane_xy=fld.PlaneGrid("XY", by_name["field.plane_xy"]),
            plane_yz=fld.PlaneGrid("YZ", by_name["field.plane_yz"]),
            plane_xz=fld.PlaneGrid("XZ", by_name["field.plane_xz"]),
            plane_xa=fld.PlaneGrid("XA", by_name["field.plane_xa"]),
            plane_ya=fld.PlaneGrid("YA", by_name["field.plane_ya"]),
            plane_za=fld.PlaneGrid("ZA", by_name["field.plane_za"]),
            mix_1=f.mix_1, mix_2=f.mix_2, mix_3=f.mix_3)
        n_idx = len(self.scene.indexer.weights)
        indexer = IndexerMLP(
            [by_name[f"indexer.w{i}"] for i in range(n_idx)],
            [by_name[f"indexer.b{i}"] for i in range(n_idx)])
        dec = self.scene.decoder
        decoder = type(dec)(
            [by_name["decoder.trunk_w0"], by_name["decoder.trunk_w1"]],
            [by_name["decoder.trunk_b0"], by_name["decoder.trunk_b1"]],
            [by_name[f"decoder.head_{h}_w"]
             for h in ("delta", "mask", "color", "feature")],
            [by_name[f"decoder.head_{h}_b"]
             for h in ("delta", "mask", "color", "feature")],
            feature_width=dec.feature_width)
        nonrigid = NonRigidMLP(
            [by_name[f"nonrigid.w{i}"] for i in range(3)],
            [by_name[f"nonrigid.b{i}"] for i in range(3)],
            max_offset=self.scene.nonrigid.max_offset)
        return self.scene.replaced(field=field, indexer=indexer,
                                   decoder=decoder, nonrigid=nonrigid)

    def rebuild(self, values):
        """Plain scene carrying the given flat parameter values."""
        return self._assemble(self.split(values))

    def tensor_view(self, values=None):
        """(leaf tensors, scene wired to them) for one gradient evaluation."""
        if values is None:
            values = self.flatten()
        tensors = [ad.parameter(p) for p in self.split(values)]
        return tensors, self._assemble(tensors)


# -- loss terms -----------------------------------------------------------------------


def make_fused_distance(scene, labels=None, contributions=None, pose=None,
                        force_offsets=False):
    """Callable p -> fused signed distance, as the renderer computes it."""
    labels = resolve_active_labels(scene) if labels is None else list(labels)
    if contributions is None:
        contributions = scene_contributions(scene, labels)

    def d_fn(points):
        return fused_at_points(scene, points, labels, contributions,
                               pose=pose, force_offsets=force_offsets).d

    return d_fn


def _distance_callable(target):
    return target if callable(target) else make_fused_distance(target)


def _safe_norm(sq):
    """sqrt(sq) with exact zeros kept at zero and no NaN in the backward."""
    vals = ad.value(sq)
    dead = vals == 0.0
    if not np.any(dead):
        return ad.sqrt(sq)
    alive = (~dead).astype(vals.dtype)
    return ad.sqrt(sq + dead.astype(vals.dtype)) * alive


def loss_eikonal(target, points, h: float = EIKONAL_H):
    """mean (|grad d| - 1)^2 with central differences of the fused distance.

    target is a scene or a callable (P, 3) -> (P,). The probed values carry
    gradients; the probe offsets do not.
    """
    d_fn = _distance_callable(target)
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("points must be (P, 3)")
    probes = []
    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        probes.append(pts + e)
        probes.append(pts - e)
    d = d_fn(np.concatenate(probes, axis=0))
    n = len(pts)
    sq = None
    for axis in range(3):
        hi = d[2 * axis * n:(2 * axis + 1) * n]
        lo = d[(2 * axis + 1) * n:(2 * axis + 2) * n]
        g = (hi - lo) * (1.0 / (2.0 * h))
        sq = g * g if sq is None else sq + g * g
    diff = _safe_norm(sq) - 1.0
    return ad.mean(diff * diff)


def loss_surface(target, points):
    """mean exp(-100 |d|): pulls the zero level set toward probe points."""
    d_fn = _distance_callable(target)
    return _surface_term(d_fn(np.asarray(points, dtype=np.float64)))


def _surface_term(d):
    return ad.mean(ad.exp(-SURFACE_SHARPNESS * ad.absolute(d)))


def loss_rsdf(deltas):
    """mean |residual distance| over a decode batch (array or list of them)."""
    if isinstance(deltas, (list, tuple)):
        parts = [ad.reshape(d, (-1,)) for d in deltas if d is not None]
        if not parts:
            return 0.0
        deltas = ad.concatenate(parts, axis=0) if len(parts) > 1 else parts[0]
    return ad.mean(ad.absolute(deltas))


def loss_nonrig(offsets):
    """mean offset norm over an offsets batch (array or list of (P, 3))."""
    if isinstance(offsets, (list, tuple)):
        parts = [o for o in offsets if o is not None]
        if not parts:
            return 0.0
        offsets = ad.concatenate(parts, axis=0) if len(parts) > 1 else parts[0]
    sq = ad.summe(offsets * offsets, axis=1)
    return ad.mean(_safe_norm(sq))


def reconstruction_mse(rgb, target_rgb, attr_weights, target_attr_weights,
                       semantic_weight: float = 0.1):
    """Color MSE plus down-weighted attribute-weight-map MSE."""
    dr = rgb - target_rgb
    da = attr_weights - target_attr_weights
    out = ad.mean(dr * dr)
    if ad.value(da).size:
        out = out + semantic_weight * ad.mean(da * da)
    return out


# -- batches --------------------------------------------------------------------------


class Batch:
    """One step's frozen inputs: rays with target renders, plus probe points."""

    def __init__(self, labels, pose, origin=None, dirs=None, depths=None,
                 target_rgb=None, target_attr=None, reg_points=None):
        self.labels = list(labels)
        self.pose = pose
        self.origin = origin
        self.dirs = dirs
        self.depths = depths
        self.target_rgb = target_rgb
        self.target_attr = target_attr
        self.reg_points = reg_points


def make_batch(oracle, config: FitConfig, step: int, resolution=None) -> Batch:
    """Deterministic batch for one step: a random orbit view rendered by the
    frozen target, subsampled to rays that cross the cube, plus uniform probe
    points for the regularizers."""
    resolution = config.resolutions[0] if resolution is None else int(resolution)
    rng = np.random.default_rng((config.seed, step))
    labels = resolve_active_labels(oracle)
    pose = oracle.template.rest_pose()
    batch = Batch(labels, pose)

    if config.lambdas["recon"] > 0:
        yaw = rng.uniform(0.0, 2.0 * np.pi)
        pitch = rng.uniform(-0.35, 0.35)
        cam = orbit_camera(yaw, pitch, 3.0, resolution)
        grid = generate_rays(cam, oracle.near, oracle.far)
        dirs = grid.directions.reshape(-1, 3)
        enter, exit_, hit = _slab_entry_exit(
            grid.origin, dirs, np.full(3, -1.0), np.full(3, 1.0),
            oracle.near, oracle.far)
        live = np.flatnonzero(hit & (exit_ > enter))
        k = min(config.rays_per_step, live.size)
        sel = rng.choice(live, size=k, replace=False)
        t0, t1 = enter[sel], exit_[sel]
        s = oracle.samples_per_ray
        strata = (np.arange(s) + rng.random((k, s))) / s
        depths = t0[:, None] + strata * (t1 - t0)[:, None]
        contribs = scene_contributions(oracle, labels)
        rgb, attr, _, _ = forward_rays(
            oracle, grid.origin, dirs[sel], depths, pose, labels, contribs,
            force_offsets=True)
        batch.origin = grid.origin
        batch.dirs = dirs[sel]
        batch.depths = depths
        batch.target_rgb = ad.value(rgb)
        batch.target_attr = ad.value(attr)

    if any(config.lambdas[k] > 0 for k in ("eik", "surf", "rsdf", "nonrig")):
        batch.reg_points = rng.uniform(-1.0, 1.0,
                                       (config.reg_points_per_step, 3))
    return batch


# -- total loss and gradient ----------------------------------------------------------


def _evaluate(scene, config: FitConfig, batch: Batch, step: int = 0):
    """Loss terms on one batch; returns (report, total node for backward)."""
    lam = config.lambdas
    terms = {}
    labels = batch.labels
    contribs = None
    needs_field = (lam["recon"] > 0 and batch.dirs is not None) or \
        (batch.reg_points is not None and
         any(lam[k] > 0 for k in ("eik", "surf", "rsdf", "nonrig")))
    if needs_field and labels:
        contribs = scene_contributions(scene, labels)

    if lam["recon"] > 0 and batch.dirs is not None:
        rgb, attr, _, _ = forward_rays(
            scene, batch.origin, batch.dirs, batch.depths, batch.pose,
            labels, contribs, force_offsets=True)
        terms["recon"] = reconstruction_mse(rgb, batch.target_rgb,
                                            attr, batch.target_attr)

    if batch.reg_points is not None and contribs is not None:
        pts = batch.reg_points
        if lam["rsdf"] > 0 or lam["surf"] > 0 or lam["nonrig"] > 0:
            fused, parts = fused_at_points(
                scene, pts, labels, contribs, pose=batch.pose,
                force_offsets=True, return_parts=True)
            if lam["surf"] > 0:
                terms["surf"] = _surface_term(fused.d)
            if lam["rsdf"] > 0:
                terms["rsdf"] = loss_rsdf(parts.deltas)
            if lam["nonrig"] > 0:
                terms["nonrig"] = loss_nonrig(parts.offsets)
        if lam["eik"] > 0:
            d_fn = make_fused_distance(scene, labels, contribs,
                                       pose=batch.pose, force_offsets=True)
            terms["eik"] = loss_eikonal(d_fn, pts)

    if lam["orth"] > 0:
        vecs = index_vectors(scene.indexer, len(scene.catalog))
        terms["orth"] = opr_loss([vecs[i] for i in range(len(scene.catalog))])

    total = 0.0
    for name in TERM_ORDER:
        if name in terms and lam[name] > 0:
            total = terms[name] * lam[name] + total
    values = {name: float(ad.value(terms.get(name, 0.0)))
              for name in TERM_ORDER}
    return LossReport(step, values, float(ad.value(total))), total


def total_loss(scene, config: FitConfig, batch: Batch,
               step: int = 0) -> LossReport:
    """Forward-only evaluation of every active loss term."""
    report, _ = _evaluate(scene, config, batch, step)
    return report


def _loss_and_grad(pset: ParameterSet, values, config, batch, step):
    tensors, view = pset.tensor_view(values)
    report, total = _evaluate(view, config, batch, step)
    if not np.isfinite(report.total):
        raise DivergenceError(f"non-finite loss at step {step}")
    if not isinstance(total, ad.Tensor):
        return report, np.zeros(pset.size)
    total.backward()
    parts = []
    for name, t, shape in zip(pset.names, tensors, pset.shapes):
        g = t.grad if t.grad is not None else np.zeros(shape)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(
                f"non-finite gradient in segment {name} at step {step}")
        parts.append(np.asarray(g, dtype=np.float64).ravel())
    return report, np.concatenate(parts)


def gradient(scene, config: FitConfig, batch: Batch, step: int = 0):
    """(report, flat gradient) over the scene's trainable parameters."""
    pset = ParameterSet(scene)
    return _loss_and_grad(pset, pset.flatten(), config, batch, step)


def loss_reconstruction(scene, oracle, cameras, poses=None,
                        rays_per_camera: int = 64, seed: int = 0):
    """Reconstruction term over explicit views; targets come from the oracle."""
    if tuple(scene.catalog.names) != tuple(oracle.catalog.names):
        raise ValueError("scene and oracle catalogs differ")
    labels = resolve_active_labels(oracle)
    if poses is None:
        poses = [None] * len(cameras)
    total = 0.0
    for i, (cam, pose) in enumerate(zip(cameras, poses)):
        rng = np.random.default_rng((seed, i))
        grid = generate_rays(cam, oracle.near, oracle.far)
        dirs = grid.directions.reshape(-1, 3)
        enter, exit_, hit = _slab_entry_exit(
            grid.origin, dirs, np.full(3, -1.0), np.full(3, 1.0),
            oracle.near, oracle.far)
        live = np.flatnonzero(hit & (exit_ > enter))
        k = min(rays_per_camera, live.size)
        sel = rng.choice(live, size=k, replace=False)
        t0, t1 = enter[sel], exit_[sel]
        s = oracle.samples_per_ray
        strata = (np.arange(s) + rng.random((k, s))) / s
        depths = t0[:, None] + strata * (t1 - t0)[:, None]
        pose = pose if pose is not None else oracle.template.rest_pose()
        t_contribs = scene_contributions(oracle, labels)
        t_rgb, t_attr, _, _ = forward_rays(
            oracle, grid.origin, dirs[sel], depths, pose, labels, t_contribs,
            force_offsets=True)
        contribs = scene_contributions(scene, labels)
        rgb, attr, _, _ = forward_rays(
            scene, grid.origin, dirs[sel], depths, pose, labels, contribs,
            force_offsets=True)
        total = reconstruction_mse(rgb, ad.value(t_rgb),
                                   attr, ad.value(t_attr)) + total
    return total * (1.0 / max(len(cameras), 1))


# -- fitting loop ---------------------------------------------------------------------


def fit(scene, oracle, config: FitConfig, log_file=None, stream=None):
    """Momentum-SGD regression of scene onto oracle's renders.

    Streams one JSON record per step to `stream` (default stdout) and, when
    given, to log_file. Returns (fitted scene, list of LossReport).
    """
    if tuple(scene.catalog.names) != tuple(oracle.catalog.names):
        raise ValueError("scene and oracle catalogs differ")
    # quadrature and attribute set must match the target being reconstructed
    work = scene.replaced(active=oracle.active, beta=oracle.beta,
                          near=oracle.near, far=oracle.far,
                          samples_per_ray=oracle.samples_per_ray,
                          background=oracle.background)
    stream = sys.stdout if stream is None else stream
    pset = ParameterSet(work)
    values = pset.flatten()
    velocity = np.zeros_like(values)
    history = []
    handle = open(log_file, "w") if log_file is not None else None
    try:
        for step in range(config.steps):
            batch = make_batch(oracle, config, step,
                               config.resolution_at(step))
            report, grad = _loss_and_grad(pset, values, config, batch, step)
            velocity = config.momentum * velocity + grad
            values = values - config.learning_rate * velocity
            if not np.all(np.isfinite(values)):
                bad = int(np.flatnonzero(~np.isfinite(values))[0])
                raise DivergenceError(
                    f"parameters diverged in segment {pset.segment_of(bad)} "
                    f"at step {step}")
            line = report.json_line()
            if stream is not None:
                print(line, file=stream)
            if handle is not None:
                handle.write(line + "\n")
            history.append(report)
    finally:
        if handle is not None:
            handle.close()
    return pset.rebuild(values), history
