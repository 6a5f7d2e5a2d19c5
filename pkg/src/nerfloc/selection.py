"""Learning which feature dimensions to keep for matching.

Ground-truth 2D-3D pairs are generated by rendering a database view and a
nearby perturbed view of the same trained field, matching them by mutual
nearest neighbors over the full feature vector, and keeping only pairs whose
lifted 3D point reprojects close to its 2D pixel under the known relative
pose. Per-dimension costs aggregate the feature discrepancies of surviving
pairs; the mask is the exact optimum of the resulting constrained binary
program (small D, solved by sorting, with a brute-force oracle for tests).

Cost uses the absolute per-dimension difference by default ("squared" is
available behind a flag): a signed sum would be unbounded below and would not
measure discrepancy.
"""

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientOverlapError
from .geometry import Pose, project, rotation_about_axis
from .matcher import mutual_nn_pairs
from .renderer import lift_to_3d, render_map

MODES = ("exact-budget", "as-written")


@dataclass(frozen=True)
class SelectionMask:
    """Binary choice over feature dimensions, at most ``budget`` of them set."""

    mask: np.ndarray   # (d,) of {0, 1}
    budget: int
    mode: str = "exact-budget"

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=np.int64)
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask entries must be 0 or 1")
        count = int(m.sum())
        if count == 0:
            raise ValueError("empty selection is rejected (objective undefined)")
        if count > self.budget:
            raise ValueError("selected count exceeds the budget")
        m.flags.writeable = False
        object.__setattr__(self, "mask", m)

    @property
    def dim(self):
        return len(self.mask)

    @property
    def selected_count(self):
        return int(self.mask.sum())

    @property
    def indices(self):
        return np.flatnonzero(self.mask)


@dataclass(frozen=True)
class MatchPairSet:
    """Matched 2D/3D feature rows plus the pose pair they came from.

    ``points_3d`` carries the lifted location of each 3D-side feature so the
    reprojection-filter soundness can be asserted directly.
    """

    f2d: np.ndarray        # (m, d)
    f3d: np.ndarray        # (m, d)
    pixels_2d: np.ndarray  # (m, 2)
    points_3d: np.ndarray  # (m, 3)
    database_pose: Pose
    perturbed_pose: Pose

    def __post_init__(self):
        if self.f2d.shape != self.f3d.shape:
            raise ValueError("2D and 3D feature dimensions differ")

    def __len__(self):
        return len(self.f2d)


@dataclass(frozen=True)
class PerDimCost:
    c: np.ndarray
    n_pairs: int
    metric: str = "absolute"

    def __post_init__(self):
        c = np.asarray(self.c, dtype=np.float64)
        if np.any(c < 0):
            raise ValueError("costs must be non-negative")
        c.flags.writeable = False
        object.__setattr__(self, "c", c)


def perturb_pose(pose: Pose, trans_radius: float, rot_max_deg: float, rng) -> Pose:
    """Translation uniform in a ball, rotation by a uniform axis and an angle
    uniform in [0, rot_max_deg]."""
    while True:
        v = rng.uniform(-1.0, 1.0, size=3)
        if np.linalg.norm(v) <= 1.0:
            break
    axis = rng.normal(size=3)
    axis = axis / np.linalg.norm(axis)
    angle = np.radians(rng.uniform(0.0, rot_max_deg))
    r = rotation_about_axis(axis, angle) @ pose.rotation
    u, _, vt = np.linalg.svd(r)
    return Pose(u @ vt, pose.translation + trans_radius * v)


def generate_gt_pairs(params, database_pose: Pose, intrinsics, *,
                      trans_frac: float = 0.02, rot_max_deg: float = 5.0,
                      reproj_threshold: float = 3.0, rng_seed: int = 0,
                      stride: int = 2, n_samples: int = 64,
                      min_pairs: int = 20, min_acc: float = 0.5) -> MatchPairSet:
    """Render the database view and a perturbed view, match them mutually over
    the full feature vector, and keep pairs whose lifted point reprojects into
    the database camera within ``reproj_threshold`` pixels."""
    extent = float(np.max(params.bounds[1] - params.bounds[0]))
    rng = np.random.default_rng(rng_seed)
    perturbed = perturb_pose(database_pose, trans_frac * extent, rot_max_deg, rng)

    db_map = render_map(params, database_pose, intrinsics, stride=stride,
                        n_samples=n_samples, compute_color=False)
    pt_map = render_map(params, perturbed, intrinsics, stride=stride,
                        n_samples=n_samples, compute_color=False)
    cloud = lift_to_3d(pt_map, min_acc=min_acc)
    solid = db_map.acc > min_acc
    db_feats = db_map.features[solid]
    db_pixels = db_map.pixels[solid]
    if len(db_feats) == 0 or len(cloud.points) == 0:
        raise InsufficientOverlapError("no opaque pixels to match")

    i2d, i3d, _ = mutual_nn_pairs(db_feats, cloud.features)
    uv, in_front = project(database_pose, intrinsics, cloud.points[i3d])
    centers = np.stack([db_pixels[i2d, 1] + 0.5, db_pixels[i2d, 0] + 0.5], axis=1)
    err = np.linalg.norm(uv - centers, axis=1)
    keep = in_front & (err <= reproj_threshold)
    if int(keep.sum()) < min_pairs:
        raise InsufficientOverlapError(
            f"only {int(keep.sum())} pairs survived (need {min_pairs})")
    return MatchPairSet(
        f2d=db_feats[i2d[keep]],
        f3d=cloud.features[i3d[keep]],
        pixels_2d=db_pixels[i2d[keep]],
        points_3d=cloud.points[i3d[keep]],
        database_pose=database_pose,
        perturbed_pose=perturbed,
    )


def accumulate_costs(pairs: MatchPairSet, metric: str = "absolute") -> PerDimCost:
    """Per-dimension discrepancy summed over all pairs."""
    if len(pairs) == 0:
        raise ValueError("empty pair set")
    diff = pairs.f2d - pairs.f3d
    if metric == "absolute":
        c = np.abs(diff).sum(axis=0)
    elif metric == "squared":
        c = (diff * diff).sum(axis=0)
    else:
        raise ValueError(f"unknown metric '{metric}'")
    return PerDimCost(c=c, n_pairs=len(pairs), metric=metric)


def merge_costs(costs) -> PerDimCost:
    """Sum per-dimension costs accumulated from several pose pairs."""
    costs = list(costs)
    c = np.sum([x.c for x in costs], axis=0)
    return PerDimCost(c=c, n_pairs=sum(x.n_pairs for x in costs), metric=costs[0].metric)


def selection_objective(cost: PerDimCost, mask: np.ndarray, mode: str) -> float:
    sel = np.flatnonzero(mask)
    total = float(cost.c[sel].sum())
    if mode == "as-written":
        return total / len(sel)
    return total


def solve_selection(cost: PerDimCost, n_s: int, mode: str = "exact-budget") -> SelectionMask:
    """Exact optimum by sorting costs ascending (stable, so ties resolve to
    the lower dimension index).

    exact-budget: minimize the summed cost of exactly ``n_s`` dimensions.
    as-written: minimize mean selected cost over 1..n_s dimensions; the
    optimum is always a prefix of the sorted order, and ties between prefix
    lengths go to the shorter prefix.
    """
    d = len(cost.c)
    if n_s < 1:
        raise ValueError("budget must be at least 1")
    if n_s > d:
        raise ValueError("budget exceeds the feature dimension")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    order = np.argsort(cost.c, kind="stable")
    mask = np.zeros(d, dtype=np.int64)
    if mode == "exact-budget":
        mask[order[:n_s]] = 1
        return SelectionMask(mask, n_s, mode)
    prefix = np.cumsum(cost.c[order[:n_s]])
    means = prefix / np.arange(1, n_s + 1)
    best_len = int(np.argmin(means)) + 1  # argmin keeps the first (shortest) tie
    mask[order[:best_len]] = 1
    return SelectionMask(mask, n_s, mode)


def brute_force_selection(cost: PerDimCost, n_s: int, mode: str = "exact-budget") -> SelectionMask:
    """Exhaustive oracle over all feasible masks, for verification.

    Candidate masks are enumerated in (cardinality, lexicographic index)
    order and compared by strictly smaller objective, so ties resolve to the
    smallest cardinality and then the lexicographically smallest index set.
    """
    d = len(cost.c)
    if d > 20:
        raise ValueError("brute force is limited to d <= 20")
    if n_s < 1 or n_s > d:
        raise ValueError("infeasible budget")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    sizes = [n_s] if mode == "exact-budget" else range(1, n_s + 1)
    best_obj = np.inf
    best = None
    for k in sizes:
        for combo in itertools.combinations(range(d), k):
            total = float(cost.c[list(combo)].sum())
            obj = total / k if mode == "as-written" else total
            if obj < best_obj:
                best_obj = obj
                best = combo
    mask = np.zeros(d, dtype=np.int64)
    mask[list(best)] = 1
    return SelectionMask(mask, n_s, mode)


def save_mask(mask: SelectionMask, path):
    """Text format: one line ``D N_s mode``, one line of D 0/1 values."""
    with open(path, "w") as f:
        f.write(f"{mask.dim} {mask.budget} {mask.mode}\n")
        f.write(" ".join(str(int(v)) for v in mask.mask) + "\n")


def load_mask(path) -> SelectionMask:
    with open(path) as f:
        d, n_s, mode = f.readline().split()
        values = np.array(f.readline().split(), dtype=np.int64)
    if len(values) != int(d):
        raise ValueError("mask length does not match header")
    return SelectionMask(values, int(n_s), mode)
