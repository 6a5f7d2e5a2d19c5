"""Analytic synthetic scenes: Lambertian primitives with exact depth.

These scenes are the ground-truth oracle for everything else: they provide
posed training/query images by exact ray casting, analytic per-pixel depth
(as ray distance), and camera layouts with known cluster structure.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, Pose, look_at, ray_grid, rotation_about_axis

MISS_DEPTH = np.inf


@dataclass(frozen=True)
class CheckerPlane:
    """Horizontal rectangle z = height with a two-color checker albedo.

    Default colors keep a strong red/green contrast while giving both squares
    a near-1 channel: rendering composites against an empty black background,
    so a surface color's largest channel is a lower bound on the accumulated
    opacity a trained field must reach there. Albedos with a bright channel
    therefore force sharp, fully opaque surfaces (which the depth checks rely
    on); very dark albedos would leave the surface free to stay translucent.
    """

    height: float
    half_extent: float
    cell: float
    color_a: tuple = (0.9, 0.9, 0.9)
    color_b: tuple = (0.25, 0.4, 0.97)

    def intersect(self, origins, dirs):
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.height - origins[:, 2]) / dz
        pts = origins + t[:, None] * dirs
        ok = (dz != 0.0) & (t > 1e-9) \
            & (np.abs(pts[:, 0]) <= self.half_extent) \
            & (np.abs(pts[:, 1]) <= self.half_extent)
        parity = (np.floor(pts[:, 0] / self.cell) + np.floor(pts[:, 1] / self.cell)) % 2
        colors = np.where(parity[:, None] == 0, self.color_a, self.color_b)
        return np.where(ok, t, MISS_DEPTH), colors


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    color: tuple

    def intersect(self, origins, dirs):
        oc = origins - np.asarray(self.center)
        b = np.einsum("ij,ij->i", oc, dirs)
        c = np.einsum("ij,ij->i", oc, oc) - self.radius ** 2
        disc = b * b - c
        sq = np.sqrt(np.maximum(disc, 0.0))
        t = np.where(-b - sq > 1e-9, -b - sq, -b + sq)
        ok = (disc > 0.0) & (t > 1e-9)
        colors = np.broadcast_to(np.asarray(self.color, dtype=np.float64), (len(t), 3))
        return np.where(ok, t, MISS_DEPTH), colors


@dataclass(frozen=True)
class Box:
    """Axis-aligned solid-color box."""

    corner_min: tuple
    corner_max: tuple
    color: tuple

    def intersect(self, origins, dirs):
        lo = np.asarray(self.corner_min, dtype=np.float64)
        hi = np.asarray(self.corner_max, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            ta = (lo - origins) * inv
            tb = (hi - origins) * inv
        tmin = np.minimum(ta, tb)
        tmax = np.maximum(ta, tb)
        parallel = dirs == 0.0
        inside = (origins >= lo) & (origins <= hi)
        tmin = np.where(parallel, np.where(inside, -np.inf, np.inf), tmin)
        tmax = np.where(parallel, np.where(inside, np.inf, -np.inf), tmax)
        t0 = tmin.max(axis=1)
        t1 = tmax.min(axis=1)
        t = np.where(t0 > 1e-9, t0, t1)
        ok = (t1 > np.maximum(t0, 1e-9)) & (t > 1e-9)
        colors = np.broadcast_to(np.asarray(self.color, dtype=np.float64), (len(t), 3))
        return np.where(ok, t, MISS_DEPTH), colors


@dataclass(frozen=True)
class SyntheticScene:
    """Primitives under constant ambient light inside an axis-aligned bound."""

    primitives: tuple
    bounds: np.ndarray  # (2, 3) min/max corners

    def __post_init__(self):
        b = np.array(self.bounds, dtype=np.float64)
        b.flags.writeable = False
        object.__setattr__(self, "bounds", b)
        object.__setattr__(self, "primitives", tuple(self.primitives))

    def cast(self, origins, dirs):
        """Nearest-hit colors and ray distances; misses get MISS_DEPTH and black."""
        n = len(origins)
        depth = np.full(n, MISS_DEPTH)
        colors = np.zeros((n, 3))
        for prim in self.primitives:
            t, c = prim.intersect(origins, dirs)
            closer = t < depth
            depth = np.where(closer, t, depth)
            colors = np.where(closer[:, None], c, colors)
        return colors, depth

    def extent(self):
        """Largest side of the bounding box, the scale used for error budgets."""
        return float(np.max(self.bounds[1] - self.bounds[0]))


@dataclass(frozen=True)
class PosedImage:
    rgb: np.ndarray     # (H, W, 3) in [0, 1]
    pose: Pose
    intrinsics: Intrinsics
    depth: np.ndarray   # (H, W) ray distance, MISS_DEPTH where nothing is hit

    def __post_init__(self):
        for name in ("rgb", "depth"):
            a = np.array(getattr(self, name), dtype=np.float64)
            a.flags.writeable = False
            object.__setattr__(self, name, a)


def raytrace(scene: SyntheticScene, pose: Pose, intrinsics: Intrinsics) -> PosedImage:
    """Exact nearest-hit image and depth map for one camera."""
    origins, dirs, _ = ray_grid(pose, intrinsics, stride=1)
    colors, depth = scene.cast(origins, dirs)
    h, w = intrinsics.height, intrinsics.width
    return PosedImage(colors.reshape(h, w, 3), pose, intrinsics, depth.reshape(h, w))


def default_scene() -> SyntheticScene:
    """The reference desk scene: 20-unit checker ground plane plus 3 spheres."""
    prims = (
        CheckerPlane(height=0.0, half_extent=10.0, cell=2.5),
        Sphere(center=(-3.5, -2.0, 1.8), radius=1.8, color=(0.95, 0.25, 0.2)),
        Sphere(center=(3.0, -3.0, 1.4), radius=1.4, color=(0.2, 0.95, 0.3)),
        Sphere(center=(0.5, 3.5, 2.2), radius=2.2, color=(0.95, 0.8, 0.15)),
    )
    bounds = np.array([[-10.0, -10.0, -0.5], [10.0, 10.0, 6.0]])
    return SyntheticScene(prims, bounds)


def plane_scene(half_extent: float = 6.0, cell: float = 2.0) -> SyntheticScene:
    """A bare checker plane; used where an exact ray-plane oracle is wanted."""
    prims = (CheckerPlane(height=0.0, half_extent=half_extent, cell=cell),)
    bounds = np.array([[-half_extent, -half_extent, -0.5], [half_extent, half_extent, 3.0]])
    return SyntheticScene(prims, bounds)


def make_trajectory(scene: SyntheticScene, layout: str, count: int, rng_seed: int = 0,
                    **kwargs):
    """Deterministic camera layouts with known structure.

    layout 'ring': ``count`` poses evenly spaced on a circle, looking at the
    scene center. 'grid': a top-down sweep over the scene. 'multi_site':
    clusters of nearby poses at well-separated sites, each site observed under
    ``headings`` distinct viewing directions (labels from
    :func:`multi_site_labels`).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(rng_seed)
    center = scene.bounds.mean(axis=0)
    span = scene.bounds[1] - scene.bounds[0]
    if layout == "ring":
        radius = kwargs.get("radius", 0.65 * float(np.max(span[:2])))
        height = kwargs.get("height", center[2] + 0.45 * float(np.max(span[:2])))
        target = kwargs.get("target", (center[0], center[1], scene.bounds[0][2] + 0.25 * span[2]))
        phase = kwargs.get("phase", 0.0)
        poses = []
        for i in range(count):
            a = phase + 2.0 * math.pi * i / count
            pos = (center[0] + radius * math.cos(a), center[1] + radius * math.sin(a), height)
            poses.append(look_at(pos, target))
        return poses
    if layout == "grid":
        side = max(1, int(math.ceil(math.sqrt(count))))
        xs = np.linspace(scene.bounds[0][0] * 0.6, scene.bounds[1][0] * 0.6, side)
        ys = np.linspace(scene.bounds[0][1] * 0.6, scene.bounds[1][1] * 0.6, side)
        height = kwargs.get("height", scene.bounds[1][2] + 0.5 * float(np.max(span[:2])))
        poses = []
        for y in ys:
            for x in xs:
                if len(poses) == count:
                    break
                poses.append(look_at((x, y, height), (x, y, scene.bounds[0][2])))
        return poses[:count]
    if layout == "multi_site":
        sites = kwargs.get("sites", 4)
        headings = kwargs.get("headings", 2)
        site_radius = kwargs.get("site_radius", 0.9 * float(np.max(span[:2])))
        jitter = kwargs.get("jitter", 0.02 * site_radius)
        height = kwargs.get("height", center[2] + 0.4 * float(np.max(span[:2])))
        poses = []
        for i in range(count):
            site = (i * sites * headings // count) // headings
            heading = (i * sites * headings // count) % headings
            a = 2.0 * math.pi * site / sites
            base = np.array([center[0] + site_radius * math.cos(a),
                             center[1] + site_radius * math.sin(a), height])
            pos = base + rng.uniform(-jitter, jitter, size=3)
            look_dir = look_at(base, (center[0], center[1], 0.0)).forward()
            # Headings yaw around the inward direction in 0.9 rad steps, far
            # larger than the jitter but still keeping the scene in view.
            yaw = (heading - (headings - 1) / 2.0) * 0.9
            rot = rotation_about_axis((0, 0, 1), yaw)
            target = pos + 10.0 * (rot @ look_dir)
            poses.append(look_at(pos, target))
        return poses
    raise ValueError(f"unknown layout '{layout}'")


def multi_site_labels(count: int, sites: int = 4, headings: int = 2):
    """(site, heading) group labels matching the multi_site layout ordering."""
    return np.array([(i * sites * headings // count) for i in range(count)])


def default_intrinsics(size: int = 64) -> Intrinsics:
    return Intrinsics(fx=float(size), fy=float(size), cx=size / 2.0, cy=size / 2.0,
                      width=size, height=size)


def save_posed_image(image: PosedImage, path_prefix):
    """Persist RGB as binary PPM (P6, 8-bit) and depth as a raw float32
    sidecar ``<prefix>.depth``; misses are stored as +inf."""
    prefix = str(path_prefix)
    rgb8 = np.clip(np.round(image.rgb * 255.0), 0, 255).astype(np.uint8)
    h, w = rgb8.shape[:2]
    with open(prefix + ".ppm", "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(rgb8.tobytes())
    with open(prefix + ".depth", "wb") as f:
        f.write(image.depth.astype("<f4").tobytes())


def load_posed_image(path_prefix, pose: Pose, intrinsics: Intrinsics) -> PosedImage:
    prefix = str(path_prefix)
    with open(prefix + ".ppm", "rb") as f:
        magic = f.readline().strip()
        if magic != b"P6":
            raise ValueError("not a binary PPM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(f.readline())
        rgb8 = np.frombuffer(f.read(w * h * 3), dtype=np.uint8).reshape(h, w, 3)
    depth = np.fromfile(prefix + ".depth", dtype="<f4").reshape(h, w).astype(np.float64)
    return PosedImage(rgb8.astype(np.float64) / maxval, pose, intrinsics, depth)
