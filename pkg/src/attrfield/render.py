"""Compositional SDF volume rendering.

Per sample: every active attribute's feature vector is decoded by one shared
MLP into (residual distance, mask logit, color, feature); a masked softmax
over the logits fuses them onto the template SDF:

    d = d_t + sum_i m'_i * delta_d_i,   c = sum_i m'_i * c_i

Density is sigmoid(-d/beta)/beta and rays integrate with the usual
transmittance quadrature. The fused feature f is carried and logged but no
image is decoded from it.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autodiff as ad
from . import field as fld
from .deform import nonrigid_offset_many, skinning_transform, template_sdf
from .indexing import index_forward
from .sampling import generate_rays

log = logging.getLogger(__name__)

WHITE = np.array([1.0, 1.0, 1.0])
DELTA_BOUND = 0.2
DEFAULT_BETA = 0.05
DEFAULT_FEATURE_WIDTH = 8
DECODER_HIDDEN = 64
PIXEL_BLOCK = 2048  # fixed work unit so thread count never changes results


class AttributeDecodeOutput:
    """One attribute's decoded heads over a sample batch."""

    def __init__(self, delta_d, mask_logit, color, feature):
        self.delta_d = delta_d
        self.mask_logit = mask_logit
        self.color = color
        self.feature = feature


class DecoderMLP:
    """Two-layer trunk with four heads; one set of weights for all attributes."""

    def __init__(self, trunk_weights, trunk_biases, head_weights, head_biases,
                 feature_width: int = DEFAULT_FEATURE_WIDTH):
        if len(trunk_weights) != 2 or len(head_weights) != 4:
            raise ValueError("decoder needs a 2-layer trunk and 4 heads")
        self.trunk_weights = list(trunk_weights)
        self.trunk_biases = list(trunk_biases)
        self.head_weights = list(head_weights)  # order: delta, mask, color, feature
        self.head_biases = list(head_biases)
        self.feature_width = int(feature_width)

    @classmethod
    def build(cls, feature_dim: int, feature_width: int = DEFAULT_FEATURE_WIDTH,
              hidden: int = DECODER_HIDDEN, seed: int = 0) -> "DecoderMLP":
        rng = np.random.default_rng(seed)

        def draw(fan_in, fan_out):
            w = rng.standard_normal((fan_in, fan_out), dtype=np.float32)
            return (w / np.float32(np.sqrt(fan_in))).astype(np.float64)

        trunk_w = [draw(feature_dim, hidden), draw(hidden, hidden)]
        trunk_b = [np.zeros(hidden), np.zeros(hidden)]
        head_shapes = [(hidden, 1), (hidden, 1), (hidden, 3), (hidden, feature_width)]
        head_w = [draw(*s) for s in head_shapes]
        head_b = [np.zeros(s[1]) for s in head_shapes]
        # geometry starts exactly on the template: zero the residual head
        head_w[0] = np.zeros_like(head_w[0])
        return cls(trunk_w, trunk_b, head_w, head_b, feature_width)

    def parameters(self):
        return self.trunk_weights + self.trunk_biases + self.head_weights + self.head_biases

    def astype(self, dtype) -> "DecoderMLP":
        cast = lambda arrs: [np.asarray(ad.value(a), dtype=dtype) for a in arrs]
        return DecoderMLP(cast(self.trunk_weights), cast(self.trunk_biases),
                          cast(self.head_weights), cast(self.head_biases),
                          self.feature_width)

    def forward(self, features) -> AttributeDecodeOutput:
        h = features
        for w, b in zip(self.trunk_weights, self.trunk_biases):
            h = ad.tanh(ad.matmul(h, w) + b)
        wd, wm, wc, wf = self.head_weights
        bd, bm, bc, bf = self.head_biases
        delta = DELTA_BOUND * ad.tanh(ad.matmul(h, wd) + bd)
        logit = ad.matmul(h, wm) + bm
        color = ad.sigmoid(ad.matmul(h, wc) + bc)
        feature = ad.matmul(h, wf) + bf
        return AttributeDecodeOutput(
            ad.reshape(delta, (-1,)), ad.reshape(logit, (-1,)), color, feature)


def decode(decoder: DecoderMLP, features) -> AttributeDecodeOutput:
    """Decode feature vectors; accepts (F,) or (P, F)."""
    raw = ad.value(features)
    if not np.all(np.isfinite(raw)):
        raise ValueError("decoder input must be finite")
    if raw.ndim == 1:
        features = ad.reshape(features, (1, -1)) if isinstance(features, ad.Tensor) \
            else raw.reshape(1, -1)
    return decoder.forward(features)


class FusedSample:
    def __init__(self, d, color, feature, mask_weights):
        self.d = d
        self.color = color
        self.feature = feature
        self.mask_weights = mask_weights


def masked_softmax(logits, mask):
    """Row softmax over the True entries of mask; all-False rows give zeros."""
    vals = ad.value(logits)
    masked_vals = np.where(mask, vals, -np.inf)
    shift = np.max(masked_vals, axis=1, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    s = ad.clip(logits - shift, -60.0, 0.0)
    e = ad.exp(s) * mask.astype(vals.dtype)
    row_dead = ~mask.any(axis=1, keepdims=True)
    denom = ad.summe(e, axis=1, keepdims=True) + row_dead.astype(vals.dtype)
    return e / denom


def fuse(outputs, d_t, active_mask=None, background=WHITE) -> FusedSample:
    """Blend per-attribute decodes over the template SDF.

    outputs: AttributeDecodeOutput per active attribute, batch-aligned.
    active_mask: (P, N) bool, column j gating outputs[j]; None means all on.
    """
    d_t_vals = ad.value(d_t)
    n_samples = d_t_vals.shape[0]
    if not outputs:
        color = np.broadcast_to(np.asarray(background, dtype=d_t_vals.dtype),
                                (n_samples, 3)).copy()
        return FusedSample(d_t, color, np.zeros((n_samples, 0)),
                           np.zeros((n_samples, 0)))
    if active_mask is None:
        active_mask = np.ones((n_samples, len(outputs)), dtype=bool)
    logits = ad.stack([o.mask_logit for o in outputs], axis=1)
    weights = masked_softmax(logits, active_mask)
    delta = ad.stack([o.delta_d for o in outputs], axis=1)
    d = d_t + ad.summe(weights * delta, axis=1)
    w3 = ad.reshape(weights, (n_samples, len(outputs), 1))
    colors = ad.stack([o.color for o in outputs], axis=1)
    color = ad.summe(colors * w3, axis=1)
    feats = ad.stack([o.feature for o in outputs], axis=1)
    feature = ad.summe(feats * w3, axis=1)
    # rows with nothing active fall back to the template and backdrop
    dead = ~active_mask.any(axis=1)
    if np.any(dead):
        color = color + np.where(dead[:, None],
                                 np.asarray(background, dtype=d_t_vals.dtype), 0.0)
    return FusedSample(d, color, feature, weights)


def sdf_to_density(d, beta: float):
    """Laplace-style conversion; sigma(0) = 1/(2 beta)."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    return ad.sigmoid(-d / beta) * (1.0 / beta)


def integrate_samples(depths, fused: FusedSample, beta: float, far: float,
                      background=WHITE):
    """Quadrature over (P, S) sample batches.

    Returns (rgb (P,3), attribute weights (P,N), depth (P,), opacity (P,)).
    """
    depths = np.asarray(depths)
    n_rays, n_samples = depths.shape
    sigma = ad.reshape(sdf_to_density(fused.d, beta), (n_rays, n_samples))
    delta = np.concatenate([np.diff(depths, axis=1),
                            far - depths[:, -1:]], axis=1)
    tau = sigma * delta.astype(ad.value(sigma).dtype)
    alpha = 1.0 - ad.exp(-tau)
    exclusive = ad.cumsum(tau, axis=1) - tau
    weights = ad.exp(-exclusive) * alpha
    t_final = ad.exp(-ad.summe(tau, axis=1))
    w3 = ad.reshape(weights, (n_rays, n_samples, 1))
    bg = np.asarray(background, dtype=ad.value(depths).dtype)
    color = ad.reshape(fused.color, (n_rays, n_samples, 3))
    rgb = ad.summe(color * w3, axis=1) + ad.reshape(t_final, (n_rays, 1)) * bg
    depth = ad.summe(weights * depths, axis=1) + t_final * far
    opacity = ad.summe(weights, axis=1)
    n_attr = ad.value(fused.mask_weights).shape[-1]
    if n_attr:
        mw = ad.reshape(fused.mask_weights, (n_rays, n_samples, n_attr))
        attr = ad.summe(mw * w3, axis=1)
    else:
        attr = np.zeros((n_rays, 0))
    return rgb, attr, depth, opacity


def integrate_ray(depths, fused: FusedSample, beta: float, far: float,
                  background=WHITE):
    """Single-ray wrapper over integrate_samples."""
    rgb, attr, depth, opacity = integrate_samples(
        np.asarray(depths)[None, :], fused, beta, far, background)
    return rgb[0], attr[0], depth[0], opacity[0]


# -- scene-level rendering ---------------------------------------------------------


class RenderOutput:
    """rgb/semantic/depth/opacity images plus per-attribute weight maps."""

    def __init__(self, rgb, semantic, weights, depth, opacity, active_labels):
        self.rgb = rgb
        self.semantic = semantic
        self.weights = weights
        self.depth = depth
        self.opacity = opacity
        self.active_labels = list(active_labels)


def resolve_active_labels(scene, active=None):
    """Normalize names/labels to a sorted unique label list."""
    if active is None:
        active = getattr(scene, "active", None)
    if active is None:
        active = range(len(scene.catalog))
    labels = set()
    for item in active:
        label = scene.catalog.label(item) if isinstance(item, str) else int(item)
        if not 0 <= label < len(scene.catalog):
            raise ValueError(f"label {label} outside catalog")
        labels.add(label)
    return sorted(labels)


def scene_contributions(scene, labels):
    """Per-attribute contracted contributions, honoring edit overrides."""
    overrides = getattr(scene, "overrides", None) or {}
    out = {}
    for label in labels:
        if label in overrides:
            out[label] = overrides[label]
        else:
            vec = scene_index_vector(scene, label)
            out[label] = fld.contract_attribute(scene.field, vec)
    return out


def scene_index_vector(scene, label):
    return index_forward(scene.indexer, label).vector


def _cast_contribution(contrib, dtype):
    cast = lambda a: np.asarray(ad.value(a), dtype=dtype)
    return fld.AttributeContribution(
        plane_xy=fld.PlaneGrid("XY", cast(contrib.plane_xy.data)),
        plane_xz=fld.PlaneGrid("XZ", cast(contrib.plane_xz.data)),
        plane_yz=fld.PlaneGrid("YZ", cast(contrib.plane_yz.data)),
        profile_z=cast(contrib.profile_z), profile_y=cast(contrib.profile_y),
        profile_x=cast(contrib.profile_x),
        mix_1=cast(contrib.mix_1), mix_2=cast(contrib.mix_2),
        mix_3=cast(contrib.mix_3))


def _nonrigid_is_zero(mlp) -> bool:
    return (not np.any(ad.value(mlp.weights[-1]))
            and not np.any(ad.value(mlp.biases[-1])))


def _slab_entry_exit(origin, dirs, lo, hi, near, far):
    """Vectorized slab test; returns (enter, exit, hit) over rays."""
    n = len(dirs)
    enter = np.full(n, near)
    exit_ = np.full(n, far)
    for axis in range(3):
        d = dirs[:, axis]
        o = origin[axis]
        with np.errstate(divide="ignore"):
            inv = 1.0 / d
        t1 = (lo[axis] - o) * inv
        t2 = (hi[axis] - o) * inv
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        parallel = d == 0.0
        inside = (lo[axis] <= o) & (o <= hi[axis])
        tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
        tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
        enter = np.maximum(enter, tmin)
        exit_ = np.minimum(exit_, tmax)
    return enter, exit_, enter <= exit_


def _mask_values(labels, n_catalog):
    # scalar attribute tag fed to the offset network, spread over [0, 1]
    return {label: label / max(n_catalog - 1, 1) for label in labels}


class FusedParts:
    """Decode intermediates kept around for the regularizers.

    deltas and offsets hold the gathered per-attribute batches (rows where
    that attribute actually decoded), not full-length arrays; entries are
    None when nothing was decoded or offsets were skipped.
    """

    def __init__(self, deltas, offsets, mask_cols, d_t):
        self.deltas = deltas
        self.offsets = offsets
        self.mask_cols = mask_cols  # (P, N) bool
        self.d_t = d_t


def fused_at_points(scene, points, labels, contributions, pose=None,
                    decoder=None, force_offsets=False, return_parts=False):
    """Fused field at canonical-space points: decode each attribute, blend.

    Only samples inside an attribute's box and near the template get decoded;
    the rest are zero-filled and the fusion mask removes them, so the result
    matches a decode-everything evaluation. Gradients flow whenever the scene
    holds Tensor parameters. force_offsets runs the offset network even while
    its last layer is all zeros, keeping those parameters reachable by
    backprop.
    """
    decoder = decoder if decoder is not None else scene.decoder
    pose = pose if pose is not None else scene.template.rest_pose()
    d_t = template_sdf(points, scene.template)
    n = len(points)

    # decode only inside each attribute's box and within a shell around the
    # template: past d_t > bound + 10*beta even a maximal residual leaves the
    # density below ~5e-5/beta, so those samples stay template-only
    shell = ad.value(d_t) <= DELTA_BOUND + 10.0 * scene.beta
    mask_cols = np.stack([scene.bboxes[label].contains(points) & shell
                          for label in labels], axis=1) if labels else \
        np.zeros((n, 0), dtype=bool)
    offsets_on = force_offsets or not _nonrigid_is_zero(scene.nonrigid)
    mask_vals = _mask_values(labels, len(scene.catalog))

    outputs = []
    deltas = []
    offsets = []
    feat_width = decoder.feature_width
    for col, label in enumerate(labels):
        sel = np.flatnonzero(mask_cols[:, col])
        if not sel.size:
            outputs.append(AttributeDecodeOutput(
                np.zeros(n, dtype=d_t.dtype), np.zeros(n, dtype=d_t.dtype),
                np.zeros((n, 3), dtype=d_t.dtype),
                np.zeros((n, feat_width), dtype=d_t.dtype)))
            deltas.append(None)
            offsets.append(None)
            continue
        x = points[sel]
        off = None
        if offsets_on:
            off = nonrigid_offset_many(scene.nonrigid, x, pose, mask_vals[label])
            if isinstance(off, ad.Tensor):
                x = off + x
            else:
                x = x + off.astype(x.dtype, copy=False)
        dec = decoder.forward(fld.eval_attribute_many(contributions[label], x))
        outputs.append(AttributeDecodeOutput(
            ad.scatter_rows(dec.delta_d, sel, n),
            ad.scatter_rows(dec.mask_logit, sel, n),
            ad.scatter_rows(dec.color, sel, n),
            ad.scatter_rows(dec.feature, sel, n)))
        deltas.append(dec.delta_d)
        offsets.append(off)

    fused = fuse(outputs, d_t, mask_cols, scene.background)
    if return_parts:
        return fused, FusedParts(deltas, offsets, mask_cols, d_t)
    return fused


def forward_rays(scene, origin, dirs, depths, pose, labels, contributions,
                 decoder=None, dtype=None, force_offsets=False):
    """Shared ray pipeline: deform, decode, fuse, integrate."""
    n_rays, n_samples = depths.shape
    pts = (origin[None, None, :] + depths[:, :, None] * dirs[:, None, :])
    flat = pts.reshape(-1, 3)
    if dtype is not None:
        flat = flat.astype(dtype)
    pose = pose if pose is not None else scene.template.rest_pose()
    if pose.is_rest:
        skinned = flat
    else:
        skinned = skinning_transform(flat.astype(np.float64), pose,
                                     scene.template)
        if dtype is not None:
            skinned = skinned.astype(dtype)
    fused = fused_at_points(scene, skinned, labels, contributions, pose=pose,
                            decoder=decoder, force_offsets=force_offsets)
    if ad.value(fused.feature).size:
        log.debug("fused feature mean norm %.4g",
                  float(np.linalg.norm(ad.value(fused.feature), axis=-1).mean()))
    return integrate_samples(depths, fused, scene.beta, scene.far,
                             scene.background)


def render_image(scene, camera, active=None, pose=None, seed=0, jitter=True,
                 n_threads: int = 1, dtype=np.float32) -> RenderOutput:
    """Full image render; bit-identical for a given seed at any thread count."""
    labels = resolve_active_labels(scene, active)
    contributions = {label: _cast_contribution(c, dtype)
                     for label, c in scene_contributions(scene, labels).items()}
    decoder = scene.decoder.astype(dtype)
    grid = generate_rays(camera, scene.near, scene.far)
    h, w = grid.shape
    dirs = grid.directions.reshape(-1, 3)
    origin = grid.origin
    n_pix = h * w
    n_cat = len(scene.catalog)
    s = scene.samples_per_ray

    rgb = np.empty((n_pix, 3), dtype=dtype)
    weights = np.zeros((n_pix, len(labels)), dtype=dtype)
    depth = np.empty(n_pix, dtype=dtype)
    opacity = np.zeros(n_pix, dtype=dtype)
    semantic = np.full(n_pix, n_cat, dtype=np.int16)

    cube_lo, cube_hi = np.full(3, -1.0), np.full(3, 1.0)

    def run_block(start):
        stop = min(start + PIXEL_BLOCK, n_pix)
        b_dirs = dirs[start:stop]
        # samples span the whole cube chord: the template is dense everywhere,
        # boxes only gate which attributes get decoded
        enter, exit_, hit = _slab_entry_exit(origin, b_dirs, cube_lo, cube_hi,
                                             scene.near, scene.far)
        live = hit & (exit_ > enter)

        bg = np.asarray(scene.background, dtype=dtype)
        rgb[start:stop] = bg
        depth[start:stop] = scene.far
        if not np.any(live):
            return
        idx = np.flatnonzero(live) + start
        t0, t1 = enter[live], exit_[live]
        n_live = len(t0)
        if jitter:
            rng = np.random.default_rng((seed, start))
            offs = rng.random((n_live, s))
        else:
            offs = np.full((n_live, s), 0.5)
        strata = (np.arange(s) + offs) / s
        depths = (t0[:, None] + strata * (t1 - t0)[:, None]).astype(np.float64)

        out_rgb, out_attr, out_depth, out_op = forward_rays(
            scene, origin, b_dirs[live], depths, pose, labels, contributions,
            decoder=decoder, dtype=dtype)
        rgb[idx] = out_rgb
        weights[idx] = out_attr
        depth[idx] = out_depth
        opacity[idx] = out_op
        if labels:
            t_final = np.maximum(1.0 - out_op, 0.0)
            stacked = np.concatenate([out_attr, t_final[:, None]], axis=1)
            best = np.argmax(stacked, axis=1)
            semantic[idx] = np.where(best < len(labels),
                                     np.asarray(labels, dtype=np.int16)[
                                         np.minimum(best, len(labels) - 1)],
                                     n_cat)

    starts = list(range(0, n_pix, PIXEL_BLOCK))
    if n_threads <= 1:
        for start in starts:
            run_block(start)
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            list(pool.map(run_block, starts))

    return RenderOutput(
        rgb=np.clip(rgb.reshape(h, w, 3), 0.0, 1.0),
        semantic=semantic.reshape(h, w),
        weights=weights.reshape(h, w, len(labels)),
        depth=depth.reshape(h, w),
        opacity=np.clip(opacity.reshape(h, w), 0.0, 1.0),
        active_labels=labels)
