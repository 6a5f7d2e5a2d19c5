"""Volumetric quadrature along rays and lifting of rendered features to 3D.

Per ray with samples k = 1..n over intervals [t_k, t_{k+1}]:

    w_k = T_k (1 - exp(-sigma_k (t_{k+1} - t_k)))
    T_k = exp(-sum_{k' < k} sigma_{k'} (t_{k'+1} - t_{k'}))

Color, feature, and depth maps are the w-weighted sums of the per-sample
color, feature tap, and ray distance. Depth is deliberately not renormalized
by the accumulated weight; lifting instead drops low-opacity pixels.

Rays are independent: all paths below are vectorized over rays with a fixed
output ordering, so results do not depend on evaluation order.
"""

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import field as field_mod
from .geometry import (Intrinsics, Pose, Ray, SampleBatch, _sample_core, clip_to_box,
                       ray_grid)

LIFT_ACC_THRESHOLD = 0.5


def quadrature_weights(sigma, delta):
    """Per-sample weights and transmittances for (rays, samples) arrays.

    Returns (weights (r, n), transmittance (r, n+1)); transmittance[:, k] is
    the probability of reaching sample k unoccluded, transmittance[:, -1] the
    probability of passing through entirely.
    """
    sigma = np.atleast_2d(sigma)
    delta = np.atleast_2d(delta)
    a = sigma * delta
    s = np.cumsum(a, axis=1)
    trans = np.exp(-np.concatenate([np.zeros((len(a), 1)), s], axis=1))
    weights = trans[:, :-1] * (1.0 - np.exp(-a))
    return weights, trans


def quadrature_backward(sigma, delta, colors, weights, d_rendered):
    """Backward pass of the quadrature color sum.

    ``d_rendered`` (r, 3) is the upstream gradient on the rendered colors.
    Returns (d_sigma (r, n), d_colors (r, n, 3)).
    """
    a = sigma * delta
    s = np.cumsum(a, axis=1)
    trans_next = np.exp(-s)  # T_{k+1}
    d_colors = weights[..., None] * d_rendered[:, None, :]
    wc = weights[..., None] * colors
    suffix = np.flip(np.cumsum(np.flip(wc, axis=1), axis=1), axis=1) - wc
    inner = trans_next[..., None] * colors - suffix
    d_a = np.einsum("rc,rnc->rn", d_rendered, inner)
    return d_a * delta, d_colors


@dataclass(frozen=True)
class RayRender:
    """One ray's accumulated color, feature, depth, opacity, and raw weights."""

    color: np.ndarray
    feature: np.ndarray
    depth: float
    acc: float
    weights: np.ndarray


@dataclass(frozen=True)
class RenderedMap:
    """Per-pixel render results over a (possibly strided) image grid."""

    pose: Pose
    intrinsics: Intrinsics
    stride: int
    pixels: np.ndarray     # (m, 2) (row, col) of each grid cell, row-major
    colors: np.ndarray     # (m, 3)
    features: np.ndarray   # (m, d)
    depth: np.ndarray      # (m,)
    acc: np.ndarray        # (m,)
    feature_dims: np.ndarray  # indices into the full feature vector

    @property
    def grid_shape(self):
        h = (self.intrinsics.height + self.stride - 1) // self.stride
        w = (self.intrinsics.width + self.stride - 1) // self.stride
        return h, w


def _selected_dims(params, selection):
    if selection is None:
        return np.arange(params.feature_dim)
    if selection.dim != params.feature_dim:
        raise ValueError("selection mask dimension does not match the field")
    return selection.indices


def _gather_features(params, out, dims):
    """Assemble only the requested feature dimensions from the forward pass."""
    d_pos = params.config.d_pos
    pos_dims = dims[dims < d_pos]
    mlp_dims = dims[dims >= d_pos] - d_pos
    cols = []
    if len(pos_dims):
        cols.append(out["enc"][:, pos_dims])
    if len(mlp_dims):
        cols.append(out["bottleneck"][:, mlp_dims])
    feats = np.concatenate(cols, axis=1) if cols else np.zeros((len(out["sigma"]), 0))
    # Restore the caller's dim ordering (pos dims first is already canonical
    # because selection indices are sorted ascending).
    return feats


def _render_batch(params, origins, dirs, t0, t1, hit, n_samples, dims, compute_color):
    """Core renderer over ray arrays; rays with hit=False come back as vacuum."""
    n_rays = len(origins)
    colors = np.zeros((n_rays, 3))
    feats = np.zeros((n_rays, len(dims)))
    depth = np.zeros(n_rays)
    acc = np.zeros(n_rays)
    if np.any(hit):
        o, d = origins[hit], dirs[hit]
        batch = _sample_core(o, d, t0[hit], t1[hit], n_samples, None)
        denc = np.repeat(field_mod._encode_dirs(d, params.config.l_dir),
                         n_samples, axis=0) if compute_color else None
        out = field_mod.forward(params, batch.positions, None,
                                need_color=compute_color, dir_encoding=denc)
        r = int(hit.sum())
        sigma = out["sigma"].reshape(r, n_samples)
        delta = (batch.t_end - batch.t_start).reshape(r, n_samples)
        weights, _ = quadrature_weights(sigma, delta)
        centers = 0.5 * (batch.t_start + batch.t_end).reshape(r, n_samples)
        f = _gather_features(params, out, dims).reshape(r, n_samples, len(dims))
        feats[hit] = np.einsum("rn,rnd->rd", weights, f)
        depth[hit] = np.einsum("rn,rn->r", weights, centers)
        acc[hit] = weights.sum(axis=1)
        if compute_color:
            c = out["color"].reshape(r, n_samples, 3)
            colors[hit] = np.einsum("rn,rnc->rc", weights, c)
    return colors, feats, depth, acc


def render_ray(params, ray: Ray, samples: SampleBatch, selection=None) -> RayRender:
    """Quadrature along a single ray using a precomputed sample batch."""
    if samples.positions.shape[0] == 0:
        raise ValueError("empty sample batch")
    dims = _selected_dims(params, selection)
    n = samples.positions.shape[0]
    sample_dirs = np.broadcast_to(ray.direction, (n, 3))
    out = field_mod.forward(params, samples.positions, sample_dirs)
    sigma = out["sigma"][None, :]
    delta = (samples.t_end - samples.t_start)[None, :]
    weights, _ = quadrature_weights(sigma, delta)
    w = weights[0]
    centers = 0.5 * (samples.t_start + samples.t_end)
    feats = _gather_features(params, out, dims)
    return RayRender(
        color=w @ out["color"],
        feature=w @ feats,
        depth=float(w @ centers),
        acc=float(w.sum()),
        weights=w,
    )


def render_map(params, pose: Pose, intrinsics: Intrinsics, stride: int = 1,
               selection=None, n_samples: int = 64, compute_color: bool = True) -> RenderedMap:
    """Render every stride-th pixel. Deterministic: midpoint sampling within
    the ray's intersection with the scene box; rays that miss the box render
    as vacuum."""
    dims = _selected_dims(params, selection)
    origins, dirs, pixels = ray_grid(pose, intrinsics, stride)
    t0, t1, hit = clip_to_box(origins, dirs, params.bounds)
    colors, feats, depth, acc = _render_batch(
        params, origins, dirs, t0, t1, hit, n_samples, dims, compute_color)
    return RenderedMap(pose=pose, intrinsics=intrinsics, stride=stride, pixels=pixels,
                       colors=colors, features=feats, depth=depth, acc=acc,
                       feature_dims=dims)


@dataclass(frozen=True)
class LiftedCloud:
    """Rendered features placed at their rendered depth along their rays."""

    points: np.ndarray    # (m, 3) world/render-frame coordinates
    features: np.ndarray  # (m, d)
    pixels: np.ndarray    # (m, 2) source (row, col)


def lift_to_3d(rendered: RenderedMap, min_acc: float = LIFT_ACC_THRESHOLD) -> LiftedCloud:
    """Place each sufficiently opaque pixel's feature at origin + depth * dir."""
    keep = rendered.acc > min_acc
    uv = np.stack([rendered.pixels[keep, 1] + 0.5, rendered.pixels[keep, 0] + 0.5], axis=1)
    from .geometry import pixel_directions
    dirs = pixel_directions(rendered.intrinsics, uv) @ rendered.pose.rotation.T
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    points = rendered.pose.translation + rendered.depth[keep, None] * dirs
    return LiftedCloud(points=points, features=rendered.features[keep].copy(),
                       pixels=rendered.pixels[keep].copy())


def save_map(rendered: RenderedMap, path):
    """Flat binary export: (width, height, d, stride) header, the pose and
    intrinsics, then per-pixel records of RGB, depth, acc, and the feature
    vector as float32."""
    d = rendered.features.shape[1]
    buf = io.BytesIO()
    buf.write(struct.pack("<4I", rendered.intrinsics.width, rendered.intrinsics.height,
                          d, rendered.stride))
    buf.write(rendered.pose.flat().astype("<f8").tobytes())
    buf.write(np.array([rendered.intrinsics.fx, rendered.intrinsics.fy,
                        rendered.intrinsics.cx, rendered.intrinsics.cy],
                       dtype="<f8").tobytes())
    buf.write(rendered.feature_dims.astype("<u4").tobytes())
    records = np.concatenate(
        [rendered.colors, rendered.depth[:, None], rendered.acc[:, None], rendered.features],
        axis=1).astype("<f4")
    buf.write(records.tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_map(path) -> RenderedMap:
    with open(path, "rb") as f:
        data = f.read()
    width, height, d, stride = struct.unpack_from("<4I", data, 0)
    offset = 16
    pose = Pose.from_flat(np.frombuffer(data, "<f8", 12, offset))
    offset += 96
    fx, fy, cx, cy = np.frombuffer(data, "<f8", 4, offset)
    offset += 32
    dims = np.frombuffer(data, "<u4", d, offset).astype(np.int64)
    offset += 4 * d
    intr = Intrinsics(fx, fy, cx, cy, width, height)
    rows = np.arange(0, height, stride)
    cols = np.arange(0, width, stride)
    m = len(rows) * len(cols)
    records = np.frombuffer(data, "<f4", m * (5 + d), offset).reshape(m, 5 + d).astype(np.float64)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    pixels = np.stack([rr.ravel(), cc.ravel()], axis=1)
    return RenderedMap(pose=pose, intrinsics=intr, stride=stride, pixels=pixels,
                       colors=records[:, :3], features=records[:, 5:],
                       depth=records[:, 3], acc=records[:, 4], feature_dims=dims)
