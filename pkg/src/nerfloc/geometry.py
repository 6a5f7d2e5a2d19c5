"""Rigid poses, pinhole cameras, rays, and sampling along rays.

Conventions, fixed once and used by every other module:

* World and camera frames are right-handed. The camera looks down its
  local -z axis; image x grows rightward (columns), image y grows
  downward (rows).
* ``Pose`` stores the camera-to-world rotation and translation.
* Rays pass through pixel centers: pixel (row, col) maps to the
  continuous image point (col + 0.5, row + 0.5).
* Depth is ray distance: the parameter t along the unit direction,
  not z-depth.

All types are immutable after construction and all operations are pure.
"""

from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-9


def _as_fixed(a, shape):
    out = np.array(a, dtype=np.float64)
    if out.shape != shape:
        raise ValueError(f"expected shape {shape}, got {out.shape}")
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform: x_world = rotation @ x_cam + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_fixed(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _as_fixed(self.translation, (3,)))
        r = self.rotation
        if not np.all(np.abs(r.T @ r - np.eye(3)) < 1e-7):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-7:
            raise ValueError("rotation determinant is not +1")

    @staticmethod
    def identity():
        return Pose(np.eye(3), np.zeros(3))

    def inverse(self):
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def transform(self, points):
        """Map camera-frame points (n, 3) to world frame."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.rotation.T + self.translation

    def inverse_transform(self, points):
        """Map world-frame points (n, 3) into this camera's frame."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return (pts - self.translation) @ self.rotation

    def forward(self):
        """Unit viewing direction in world coordinates (the -z camera axis)."""
        return -self.rotation[:, 2]

    def flat(self):
        """Row-major rotation followed by translation, as 12 float64 values."""
        return np.concatenate([self.rotation.ravel(), self.translation])

    @staticmethod
    def from_flat(values):
        v = np.asarray(values, dtype=np.float64)
        if v.shape != (12,):
            raise ValueError("expected 12 values")
        return Pose(v[:9].reshape(3, 3), v[9:])


def compose(a: Pose, b: Pose) -> Pose:
    """Return a.b: apply b first, then a."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def pose_error(estimate: Pose, truth: Pose):
    """Translation error (scene units) and rotation error (degrees, in [0, 180])."""
    trans = float(np.linalg.norm(estimate.translation - truth.translation))
    c = (np.trace(estimate.rotation.T @ truth.rotation) - 1.0) / 2.0
    if c >= 1.0 - 1e-15:  # identical rotations can round the trace just below 3
        return trans, 0.0
    rot = float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))
    return trans, rot


def rotation_about_axis(axis, angle):
    """Rodrigues rotation matrix for a rotation of ``angle`` radians about ``axis``."""
    a = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(a)
    if n == 0.0:
        return np.eye(3)
    a = a / n
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Pose at ``position`` whose -z axis points at ``target``.

    ``up`` breaks the roll ambiguity; when the viewing direction is nearly
    parallel to ``up`` a fallback up vector is substituted.
    """
    position = np.asarray(position, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - position
    nf = np.linalg.norm(f)
    if nf == 0.0:
        raise ValueError("camera position coincides with target")
    f = f / nf
    up = np.asarray(up, dtype=np.float64)
    if abs(f @ up) / np.linalg.norm(up) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    x = np.cross(up, f)
    x = x / np.linalg.norm(x)
    z = -f
    y = np.cross(z, x)
    r = np.stack([x, y, z], axis=1)
    # Snap to exact orthonormality so Pose validation at 1e-9 never trips.
    u, _, vt = np.linalg.svd(r)
    return Pose(u @ vt, position)


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera: focal lengths, principal point, and image size in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")


@dataclass(frozen=True)
class Ray:
    """Origin, unit direction, and the [t_near, t_far) range to integrate over."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        object.__setattr__(self, "origin", _as_fixed(self.origin, (3,)))
        object.__setattr__(self, "direction", _as_fixed(self.direction, (3,)))
        if abs(np.linalg.norm(self.direction) - 1.0) > ORTHO_TOL:
            raise ValueError("ray direction must be unit length")
        if not (0.0 <= self.t_near < self.t_far):
            raise ValueError("require 0 <= t_near < t_far")


def pixel_directions(intrinsics: Intrinsics, uv):
    """Camera-frame unit directions through continuous image points (n, 2) = (u, v)."""
    uv = np.atleast_2d(np.asarray(uv, dtype=np.float64))
    d = np.stack(
        [
            (uv[:, 0] - intrinsics.cx) / intrinsics.fx,
            (uv[:, 1] - intrinsics.cy) / intrinsics.fy,
            -np.ones(len(uv)),
        ],
        axis=1,
    )
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def ray_grid(pose: Pose, intrinsics: Intrinsics, stride: int = 1):
    """World-frame ray origins/directions for every stride-th pixel, row-major.

    Returns (origins (m, 3), directions (m, 3), pixels (m, 2) as (row, col)).
    """
    rows = np.arange(0, intrinsics.height, stride)
    cols = np.arange(0, intrinsics.width, stride)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    pixels = np.stack([rr.ravel(), cc.ravel()], axis=1)
    uv = np.stack([pixels[:, 1] + 0.5, pixels[:, 0] + 0.5], axis=1)
    dirs_cam = pixel_directions(intrinsics, uv)
    dirs = dirs_cam @ pose.rotation.T
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    return origins, dirs, pixels


def generate_rays(pose: Pose, intrinsics: Intrinsics, pixel_subset=None,
                  t_near: float = 1e-3, t_far: float = 1e3):
    """One world-frame ray per requested pixel, through the pixel center.

    ``pixel_subset`` is a list of (row, col) indices; omitted means every pixel
    in row-major order.
    """
    if pixel_subset is None:
        _, dirs, _ = ray_grid(pose, intrinsics, stride=1)
    else:
        pixels = np.atleast_2d(np.asarray(pixel_subset, dtype=np.int64))
        if np.any(pixels[:, 0] < 0) or np.any(pixels[:, 0] >= intrinsics.height) \
                or np.any(pixels[:, 1] < 0) or np.any(pixels[:, 1] >= intrinsics.width):
            raise IndexError("pixel index out of bounds")
        uv = np.stack([pixels[:, 1] + 0.5, pixels[:, 0] + 0.5], axis=1)
        dirs = pixel_directions(intrinsics, uv) @ pose.rotation.T
        dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    return [Ray(pose.translation, d, t_near, t_far) for d in dirs]


def project(pose: Pose, intrinsics: Intrinsics, points):
    """Project world points through the camera.

    Returns (uv (n, 2) continuous pixel coordinates, in_front (n,) bool).
    Points at or behind the camera plane get invalid coordinates and a False mask.
    """
    cam = pose.inverse_transform(points)
    depth = -cam[:, 2]
    valid = depth > 1e-12
    safe = np.where(valid, depth, 1.0)
    u = intrinsics.cx + intrinsics.fx * cam[:, 0] / safe
    v = intrinsics.cy + intrinsics.fy * cam[:, 1] / safe
    return np.stack([u, v], axis=1), valid


def clip_to_box(origins, dirs, bounds):
    """Slab-clip rays against an axis-aligned box.

    ``bounds`` is (2, 3): min corner, max corner. Returns (t0, t1, hit); a ray
    hits when t1 > t0 > -inf with t0 clamped to be non-negative.
    """
    bounds = np.asarray(bounds, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        lo = (bounds[0] - origins) * inv
        hi = (bounds[1] - origins) * inv
    tmin = np.minimum(lo, hi)
    tmax = np.maximum(lo, hi)
    # Parallel rays: the slab constrains nothing if inside, everything if outside.
    inside = (origins >= bounds[0]) & (origins <= bounds[1])
    parallel = dirs == 0.0
    tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
    t0 = np.maximum(tmin.max(axis=1), 1e-6)
    t1 = tmax.min(axis=1)
    hit = t1 > t0
    return t0, t1, hit


@dataclass(frozen=True)
class SampleBatch:
    """Flattened per-sample data for a batch of rays.

    Samples are ordered ray-major; every ray carries ``n_per_ray`` samples.
    Each sample owns the quadrature interval [t_start, t_end] and sits at its
    midpoint: positions[k] = origin + 0.5 (t_start + t_end) * direction.
    """

    positions: np.ndarray   # (m, 3)
    t_start: np.ndarray     # (m,)
    t_end: np.ndarray       # (m,)
    ray_index: np.ndarray   # (m,)
    n_rays: int
    n_per_ray: int

    def per_ray(self, arr):
        """Reshape a flat per-sample array to (n_rays, n_per_ray, ...)."""
        return np.asarray(arr).reshape(self.n_rays, self.n_per_ray, *np.shape(arr)[1:])


def _sample_core(origins, dirs, t0, t1, n_per_ray, rng):
    """Shared sampler: one interval per equal bin of [t0, t1].

    With an rng, the interval in bin k is centered on a uniform draw inside the
    bin (stratified jitter; the first/last interval may spill past [t0, t1] by
    at most half a bin width). Without one, intervals are the bins themselves.
    Sample positions are interval midpoints in both cases.
    """
    n_rays = len(t0)
    width = (t1 - t0) / n_per_ray
    if rng is None:
        centers = t0[:, None] + (np.arange(n_per_ray) + 0.5) * width[:, None]
        t_start = centers - 0.5 * width[:, None]
        t_end = centers + 0.5 * width[:, None]
    else:
        xi = rng.random((n_rays, n_per_ray))
        centers = t0[:, None] + (np.arange(n_per_ray) + xi) * width[:, None]
        t_start = centers - 0.5 * width[:, None]
        t_end = centers + 0.5 * width[:, None]
    positions = origins[:, None, :] + centers[..., None] * dirs[:, None, :]
    return SampleBatch(
        positions=positions.reshape(-1, 3),
        t_start=t_start.ravel(),
        t_end=t_end.ravel(),
        ray_index=np.repeat(np.arange(n_rays), n_per_ray),
        n_rays=n_rays,
        n_per_ray=n_per_ray,
    )


def _ray_arrays(rays):
    origins = np.stack([r.origin for r in rays])
    dirs = np.stack([r.direction for r in rays])
    t0 = np.array([r.t_near for r in rays])
    t1 = np.array([r.t_far for r in rays])
    return origins, dirs, t0, t1


def stratified_samples(rays, n_per_ray: int, rng_seed: int) -> SampleBatch:
    """Jittered samples: one uniform draw per equal bin of each ray's t range."""
    if n_per_ray < 2:
        raise ValueError("need at least 2 samples per ray")
    rng = np.random.default_rng(rng_seed)
    return _sample_core(*_ray_arrays(rays), n_per_ray, rng)


def midpoint_samples(rays, n_per_ray: int) -> SampleBatch:
    """Deterministic samples at the midpoints of equal bins (used for rendering)."""
    if n_per_ray < 2:
        raise ValueError("need at least 2 samples per ray")
    return _sample_core(*_ray_arrays(rays), n_per_ray, None)
