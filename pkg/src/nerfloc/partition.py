"""Pose-aware scene partitioning.

Each training pose's ray samples form a point cloud; converting those clouds
to voxel occupancy grids lets poses be clustered cheaply with Jaccard
dissimilarity (1 - intersection-over-union of occupied voxels) instead of
point-cloud distances. Every pose, and therefore every sample it generates,
is allocated to exactly one sub-field, so rendering any pose touches exactly
one set of network weights. A grid-cell allocator is kept as the baseline
cost model: there, a single pose's samples may straddle several cells.
"""

import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometryError
from .geometry import Intrinsics, Pose, _sample_core, clip_to_box, ray_grid

DEFAULT_RESOLUTION = 32
POSES_PER_BLOCK = 150  # full-scale guidance; desk configs scale this down


@dataclass(frozen=True)
class SamplerConfig:
    """How a pose is expanded into sample points for occupancy purposes."""

    pixel_stride: int = 8
    n_samples: int = 32


@dataclass(frozen=True)
class OccupancyGrid:
    bits: np.ndarray    # (g, g, g) bool
    pose_id: int
    bounds: np.ndarray  # (2, 3)

    def __post_init__(self):
        b = np.asarray(self.bits, dtype=bool)
        if not b.any():
            raise ValueError("occupancy grid is empty")
        b.flags.writeable = False
        object.__setattr__(self, "bits", b)
        object.__setattr__(self, "bounds", np.asarray(self.bounds, dtype=np.float64))


@dataclass(frozen=True)
class PosePointCloud:
    pose_id: int
    positions: np.ndarray  # (m, 3)

    def __post_init__(self):
        if len(self.positions) == 0:
            raise ValueError("empty point cloud")


@dataclass
class ScenePartition:
    """Pose-to-block allocator plus per-block occupancy frequency prototypes."""

    allocation: dict            # pose_id -> block id in [0, n_blocks)
    centers: list               # per block: (g, g, g) occupancy frequency
    n_blocks: int
    strategy: str               # "pose-aware" | "grid"
    resolution: int
    bounds: np.ndarray
    grid_cells: tuple = (1, 1, 1)  # grid strategy only
    objective_trace: list = None   # per-round total dissimilarity; not persisted

    def block_of(self, pose_id):
        return self.allocation[pose_id]


def _sample_positions(pose, intrinsics, bounds, sampler: SamplerConfig):
    origins, dirs, _ = ray_grid(pose, intrinsics, sampler.pixel_stride)
    t0, t1, hit = clip_to_box(origins, dirs, bounds)
    if not np.any(hit):
        raise DegenerateGeometryError("camera frustum misses the scene bounds")
    batch = _sample_core(origins[hit], dirs[hit], t0[hit], t1[hit],
                         sampler.n_samples, None)
    return batch.positions


def voxel_indices(positions, bounds, resolution):
    rel = (positions - bounds[0]) / (bounds[1] - bounds[0])
    idx = np.clip((rel * resolution).astype(np.int64), 0, resolution - 1)
    return idx


def pose_occupancy(pose: Pose, intrinsics: Intrinsics, bounds, *,
                   sampler: SamplerConfig = SamplerConfig(),
                   resolution: int = DEFAULT_RESOLUTION, pose_id: int = -1) -> OccupancyGrid:
    """Voxels touched by the pose's subsampled ray samples. Deterministic."""
    bounds = np.asarray(bounds, dtype=np.float64)
    positions = _sample_positions(pose, intrinsics, bounds, sampler)
    idx = voxel_indices(positions, bounds, resolution)
    bits = np.zeros((resolution,) * 3, dtype=bool)
    bits[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    return OccupancyGrid(bits=bits, pose_id=pose_id, bounds=bounds)


def jaccard_dissimilarity(bits_a, bits_b) -> float:
    """1 - |A n B| / |A u B|; defined as 1.0 when both sets are empty."""
    inter = np.count_nonzero(bits_a & bits_b)
    union = np.count_nonzero(bits_a | bits_b)
    return 1.0 - inter / union if union else 1.0


def _center_bits(center):
    return center >= 0.5


def cluster_poses(grids, k: int, rng_seed: int = 0, max_rounds: int = 100) -> ScenePartition:
    """Lloyd iteration under Jaccard dissimilarity against thresholded
    frequency prototypes, seeded by farthest-point selection.

    A cluster's prototype update is kept only if it does not worsen the
    members' total dissimilarity (a thresholded frequency grid is not the
    exact Jaccard minimizer, so updates are guarded to keep the objective
    non-increasing). Empty clusters are re-seeded from the pose farthest
    from its assigned prototype.
    """
    grids = list(grids)
    n = len(grids)
    if k > n:
        raise ValueError("more clusters than poses")
    rng = np.random.default_rng(rng_seed)
    flat = np.stack([g.bits.ravel() for g in grids])

    def dissim_to(bits):
        inter = (flat & bits).sum(axis=1)
        union = (flat | bits).sum(axis=1)
        return np.where(union > 0, 1.0 - inter / np.maximum(union, 1), 1.0)

    seeds = [int(rng.integers(n))]
    min_d = dissim_to(flat[seeds[0]])
    while len(seeds) < k:
        nxt = int(np.argmax(min_d))
        seeds.append(nxt)
        min_d = np.minimum(min_d, dissim_to(flat[nxt]))
    centers = [flat[s].astype(np.float64) for s in seeds]

    assign = np.full(n, -1, dtype=np.int64)
    trace = []
    for _ in range(max_rounds):
        dists = np.stack([dissim_to(_center_bits(c)) for c in centers], axis=1)
        new_assign = np.argmin(dists, axis=1)
        for b in range(k):
            if not np.any(new_assign == b):
                worst = int(np.argmax(dists[np.arange(n), new_assign]))
                new_assign[worst] = b
                centers[b] = flat[worst].astype(np.float64)
                dists[:, b] = dissim_to(_center_bits(centers[b]))
        trace.append(float(dists[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for b in range(k):
            members = assign == b
            candidate = flat[members].mean(axis=0)
            old_cost = dissim_to(_center_bits(centers[b]))[members].sum()
            new_cost = dissim_to(_center_bits(candidate))[members].sum()
            if new_cost <= old_cost:
                centers[b] = candidate

    g = grids[0].bits.shape[0]
    return ScenePartition(
        allocation={grids[i].pose_id: int(assign[i]) for i in range(n)},
        centers=[c.reshape((g, g, g)) for c in centers],
        n_blocks=k,
        strategy="pose-aware",
        resolution=g,
        bounds=grids[0].bounds.copy(),
        objective_trace=trace,
    )


def assign_block(partition: ScenePartition, grid: OccupancyGrid) -> int:
    """Block of an arbitrary pose: nearest prototype under the cluster metric."""
    d = [jaccard_dissimilarity(grid.bits, _center_bits(c)) for c in partition.centers]
    return int(np.argmin(d))


def grid_partition(bounds, cells=(2, 2, 1)) -> ScenePartition:
    """Baseline allocator: axis-aligned cells assigned per sample location."""
    return ScenePartition(allocation={}, centers=[], n_blocks=int(np.prod(cells)),
                          strategy="grid", resolution=0,
                          bounds=np.asarray(bounds, dtype=np.float64),
                          grid_cells=tuple(int(c) for c in cells))


def _cell_ids(positions, bounds, cells):
    rel = (positions - bounds[0]) / (bounds[1] - bounds[0])
    idx = np.clip((rel * np.asarray(cells)).astype(np.int64), 0,
                  np.asarray(cells) - 1)
    return idx[:, 0] * cells[1] * cells[2] + idx[:, 1] * cells[2] + idx[:, 2]


def num_nerf(pose: Pose, partition: ScenePartition, intrinsics: Intrinsics,
             sampler: SamplerConfig = SamplerConfig()) -> int:
    """Distinct sub-fields touched when rendering this pose.

    Pose-aware allocation sends every sample of a pose to the pose's own
    block, so the count is identically 1. The grid baseline allocates each
    sample by the cell containing it.
    """
    if partition.strategy == "pose-aware":
        return 1
    positions = _sample_positions(pose, intrinsics, partition.bounds, sampler)
    return len(np.unique(_cell_ids(positions, partition.bounds, partition.grid_cells)))


def compactness(partition: ScenePartition, clouds) -> dict:
    """Per-block trace of the covariance of member sample points."""
    by_block = {}
    for cloud in clouds:
        block = partition.allocation[cloud.pose_id]
        by_block.setdefault(block, []).append(cloud.positions)
    out = {}
    for block, parts in sorted(by_block.items()):
        pts = np.concatenate(parts)
        centered = pts - pts.mean(axis=0)
        out[block] = float(np.mean(np.sum(centered * centered, axis=1)))
    return out


def save_partition(partition: ScenePartition, path):
    payload = {
        "n_blocks": partition.n_blocks,
        "strategy": partition.strategy,
        "resolution": partition.resolution,
        "bounds": partition.bounds.tolist(),
        "grid_cells": list(partition.grid_cells),
        "allocation": {str(k): v for k, v in partition.allocation.items()},
        "centers": [c.ravel().tolist() for c in partition.centers],
    }
    with open(path, "w") as f:
        json.dump(payload, f)


def load_partition(path) -> ScenePartition:
    with open(path) as f:
        payload = json.load(f)
    g = payload["resolution"]
    centers = [np.asarray(c, dtype=np.float64).reshape((g, g, g))
               for c in payload["centers"]]
    return ScenePartition(
        allocation={int(k): int(v) for k, v in payload["allocation"].items()},
        centers=centers,
        n_blocks=payload["n_blocks"],
        strategy=payload["strategy"],
        resolution=g,
        bounds=np.asarray(payload["bounds"], dtype=np.float64),
        grid_cells=tuple(payload["grid_cells"]),
    )
