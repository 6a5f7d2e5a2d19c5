"""Pipeline wiring: configuration, persistence, evaluation, and reports.

``run_pipeline`` executes scene -> partition -> train -> select -> coarse
[-> projector] -> localize -> evaluate, persisting every stage's artifact
under the output directory and emitting a JSON report, a human-readable
table, and a per-stage timing CSV. The whole pipeline is a deterministic
function of (config, seeds); only the wall-clock fields vary between runs.
"""

import dataclasses
import json
import math
import struct
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import coarse as coarse_mod
from . import field as field_mod
from . import matcher as matcher_mod
from . import partition as partition_mod
from . import pnp as pnp_mod
from . import renderer as renderer_mod
from . import selection as selection_mod
from . import synthscene as scene_mod
from .errors import LocalizationFailure, StageError
from .geometry import Pose, pose_error

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SceneSettings:
    kind: str = "default"          # "default" | "plane"
    image_size: int = 64
    n_train: int = 100
    n_query: int = 10
    layout: str = "ring"
    sites: int = 4
    headings: int = 2


@dataclass(frozen=True)
class TrainSettings:
    steps: int = 2500
    batch_rays: int = 512
    n_samples: int = 36
    lr_init: float = 1e-2
    lr_final: float = 1e-4
    warmup_frac: float = 0.1


@dataclass(frozen=True)
class SelectionSettings:
    n_s: int = 10
    mode: str = "exact-budget"
    metric: str = "absolute"
    n_database_poses: int = 6
    trans_frac: float = 0.02
    rot_max_deg: float = 5.0
    reproj_threshold: float = 3.0
    min_pairs: int = 20
    use_mask: bool = True          # False renders/matches the full feature vector


@dataclass(frozen=True)
class PartitionSettings:
    poses_per_block: int = 150
    resolution: int = 32
    pixel_stride: int = 8
    n_samples: int = 32
    grid_cells: tuple = (2, 2, 1)

    def __post_init__(self):
        object.__setattr__(self, "grid_cells", tuple(self.grid_cells))


@dataclass(frozen=True)
class CoarseSettings:
    k_spatial: int = 8
    k_orient: int = 2
    margin: float = 0.2
    scale: float = 16.0
    embed_dim: int = 64
    epochs: int = 120
    lr: float = 3e-3


@dataclass(frozen=True)
class RansacSettings:
    max_iterations: int = 2000
    threshold_px: float = 2.0
    confidence: float = 0.999


@dataclass(frozen=True)
class MatchingSettings:
    # Full-resolution matching: with a strided grid, a query whose coarse
    # initialization lands within about one grid cell of view disparity can
    # lock onto the trivial same-cell matching (which reprojects perfectly
    # onto the initialized pose) instead of the true correspondences.
    stride: int = 1
    n_samples: int = 64
    lift_min_acc: float = 0.5


@dataclass(frozen=True)
class ProjectorSettings:
    epochs: int = 160
    lr: float = 2e-3
    batch: int = 8
    max_train_images: int = 48


@dataclass(frozen=True)
class PipelineConfig:
    scene: SceneSettings = dc_field(default_factory=SceneSettings)
    field: field_mod.FieldConfig = dc_field(default_factory=field_mod.FieldConfig)
    train: TrainSettings = dc_field(default_factory=TrainSettings)
    selection: SelectionSettings = dc_field(default_factory=SelectionSettings)
    partition: PartitionSettings = dc_field(default_factory=PartitionSettings)
    coarse: CoarseSettings = dc_field(default_factory=CoarseSettings)
    ransac: RansacSettings = dc_field(default_factory=RansacSettings)
    matching: MatchingSettings = dc_field(default_factory=MatchingSettings)
    projector: ProjectorSettings = dc_field(default_factory=ProjectorSettings)
    query_mode: str = "oracle"     # "oracle" | "projector"
    seed: int = 0


def _from_dict(cls, data):
    """Build a (possibly nested) dataclass, rejecting unknown keys."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ValueError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        target = ftype if isinstance(ftype, type) else None
        if target is not None and dataclasses.is_dataclass(target) and isinstance(value, dict):
            kwargs[name] = _from_dict(target, value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data) -> PipelineConfig:
    data = dict(data)
    version = data.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported config schema version {version}")
    return _from_dict(PipelineConfig, data)


def config_to_dict(config: PipelineConfig):
    out = dataclasses.asdict(config)
    out["schema_version"] = SCHEMA_VERSION
    return out


def load_config(path) -> PipelineConfig:
    with open(path) as f:
        return config_from_dict(json.load(f))


def save_config(config: PipelineConfig, path):
    with open(path, "w") as f:
        json.dump(config_to_dict(config), f, indent=2, default=list)


# ---------------------------------------------------------------------------
# metrics and small-file persistence


def partition_render_times(params, pose, intrinsics, grid_part, *, stride: int = 2,
                           n_samples: int = 32, repeats: int = 3):
    """Wall-clock of the field-evaluation stage under the two partition
    strategies: one sub-field for the whole pose (pose-aware) versus routing
    every sample to the grid cell containing it, each cell owning its own
    parameter copy. Weights are identical, so outputs match; only the
    dispatch differs. Returns (single_s, routed_s) as medians over repeats.
    """
    from .geometry import _sample_core, clip_to_box, ray_grid as _ray_grid

    origins, dirs, _ = _ray_grid(pose, intrinsics, stride)
    t0, t1, hit = clip_to_box(origins, dirs, params.bounds)
    batch = _sample_core(origins[hit], dirs[hit], t0[hit], t1[hit], n_samples, None)
    cells = partition_mod._cell_ids(batch.positions, grid_part.bounds,
                                    grid_part.grid_cells)
    cell_fields = {int(c): params.copy() for c in np.unique(cells)}

    def single():
        return field_mod.forward(params, batch.positions, None, need_color=False)

    def routed():
        sigma = np.empty(len(batch.positions))
        feats = np.empty((len(batch.positions), params.config.d_mlp))
        for c, sub in cell_fields.items():
            sel = cells == c
            out = field_mod.forward(sub, batch.positions[sel], None, need_color=False)
            sigma[sel] = out["sigma"]
            feats[sel] = out["bottleneck"]
        return sigma, feats

    single()
    routed()
    t_single, t_routed = [], []
    for _ in range(repeats):
        t = time.perf_counter()
        single()
        t_single.append(time.perf_counter() - t)
        t = time.perf_counter()
        routed()
        t_routed.append(time.perf_counter() - t)
    return float(np.median(t_single)), float(np.median(t_routed))


def psnr(rendered, truth) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; +inf when identical."""
    a = np.asarray(rendered, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("image dimensions differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def save_trajectory(poses, path):
    """u32 pose count, then per pose 12 little-endian float64 values
    (row-major rotation, then translation)."""
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(poses)))
        for p in poses:
            f.write(p.flat().astype("<f8").tobytes())


def load_trajectory(path):
    with open(path, "rb") as f:
        data = f.read()
    (count,) = struct.unpack_from("<I", data, 0)
    poses = []
    for i in range(count):
        vals = np.frombuffer(data, "<f8", 12, 4 + 96 * i)
        poses.append(Pose.from_flat(vals))
    return poses


# ---------------------------------------------------------------------------
# pipeline stages


def _intrinsics(config):
    return scene_mod.default_intrinsics(config.scene.image_size)


def build_scene(config: PipelineConfig):
    if config.scene.kind == "default":
        return scene_mod.default_scene()
    if config.scene.kind == "plane":
        return scene_mod.plane_scene()
    raise ValueError(f"unknown scene kind '{config.scene.kind}'")


def stage_scene(config, out, state):
    scene = build_scene(config)
    intr = _intrinsics(config)
    n_train = config.scene.n_train
    if config.scene.layout == "multi_site":
        train_poses = scene_mod.make_trajectory(
            scene, "multi_site", n_train, rng_seed=config.seed,
            sites=config.scene.sites, headings=config.scene.headings)
    else:
        train_poses = scene_mod.make_trajectory(scene, config.scene.layout, n_train,
                                                rng_seed=config.seed)
    # Query cameras sit on the same ring, phase-shifted between training poses.
    query_poses = scene_mod.make_trajectory(
        scene, "ring", config.scene.n_query, rng_seed=config.seed + 1,
        phase=math.pi / max(n_train, 1))
    train_images = [scene_mod.raytrace(scene, p, intr) for p in train_poses]
    query_images = [scene_mod.raytrace(scene, p, intr) for p in query_poses]

    d = Path(out) / "scene"
    d.mkdir(parents=True, exist_ok=True)
    save_trajectory(train_poses, d / "train_poses.traj")
    save_trajectory(query_poses, d / "query_poses.traj")
    img_dir = d / "images"
    img_dir.mkdir(exist_ok=True)
    for i, img in enumerate(train_images):
        scene_mod.save_posed_image(img, img_dir / f"train_{i:03d}")
    for i, img in enumerate(query_images):
        scene_mod.save_posed_image(img, img_dir / f"query_{i:03d}")

    state.update(scene=scene, intrinsics=intr, train_poses=train_poses,
                 query_poses=query_poses, train_images=train_images,
                 query_images=query_images)
    return state


def stage_partition(config, out, state):
    intr = state["intrinsics"]
    scene = state["scene"]
    sampler = partition_mod.SamplerConfig(config.partition.pixel_stride,
                                          config.partition.n_samples)
    grids = [partition_mod.pose_occupancy(p, intr, scene.bounds, sampler=sampler,
                                          resolution=config.partition.resolution,
                                          pose_id=i)
             for i, p in enumerate(state["train_poses"])]
    k = max(1, math.ceil(len(grids) / config.partition.poses_per_block))
    part = partition_mod.cluster_poses(grids, k, rng_seed=config.seed)
    d = Path(out) / "partition"
    d.mkdir(parents=True, exist_ok=True)
    partition_mod.save_partition(part, d / "partition.json")
    state.update(partition=part, occupancy_grids=grids, sampler=sampler)
    return state


def stage_train(config, out, state):
    part = state["partition"]
    schedule = field_mod.TrainConfig(
        steps=config.train.steps, batch_rays=config.train.batch_rays,
        n_samples=config.train.n_samples, lr_init=config.train.lr_init,
        lr_final=config.train.lr_final, warmup_frac=config.train.warmup_frac,
        seed=config.seed)
    d = Path(out) / "fields"
    d.mkdir(parents=True, exist_ok=True)
    fields = {}
    losses = {}
    for block in range(part.n_blocks):
        member_ids = [i for i, b in part.allocation.items() if b == block]
        images = [state["train_images"][i] for i in member_ids]
        params = field_mod.init_field(config.field, state["scene"].bounds,
                                      rng_seed=config.seed + block)
        trained, loss_log = field_mod.train(params, images, schedule)
        field_mod.save_checkpoint(trained, d / f"block{block}.ckpt")
        fields[block] = trained
        losses[block] = loss_log
    state.update(fields=fields, train_losses=losses)
    return state


def stage_select(config, out, state):
    cfg = config.selection
    part = state["partition"]
    intr = state["intrinsics"]
    d = Path(out) / "selection"
    d.mkdir(parents=True, exist_ok=True)
    masks = {}
    block_costs = {}
    if not cfg.use_mask:
        state.update(masks={b: None for b in range(part.n_blocks)}, selection_costs={})
        return state
    for block in range(part.n_blocks):
        member_ids = sorted(i for i, b in part.allocation.items() if b == block)
        rng = np.random.default_rng([config.seed, 31, block])
        chosen = rng.permutation(member_ids)[:cfg.n_database_poses]
        costs = []
        for j, pose_id in enumerate(chosen):
            pairs = selection_mod.generate_gt_pairs(
                state["fields"][block], state["train_poses"][pose_id], intr,
                trans_frac=cfg.trans_frac, rot_max_deg=cfg.rot_max_deg,
                reproj_threshold=cfg.reproj_threshold,
                rng_seed=int(np.random.default_rng([config.seed, 53, block, j]).integers(2**31)),
                stride=config.matching.stride, n_samples=config.matching.n_samples,
                min_pairs=cfg.min_pairs, min_acc=config.matching.lift_min_acc)
            costs.append(selection_mod.accumulate_costs(pairs, metric=cfg.metric))
        total = selection_mod.merge_costs(costs)
        mask = selection_mod.solve_selection(total, cfg.n_s, mode=cfg.mode)
        selection_mod.save_mask(mask, d / f"mask_block{block}.txt")
        masks[block] = mask
        block_costs[block] = total
    state.update(masks=masks, selection_costs=block_costs)
    return state


def stage_coarse(config, out, state):
    cfg = config.coarse
    groups = coarse_mod.two_stage_cluster(state["train_poses"], cfg.k_spatial,
                                          cfg.k_orient, rng_seed=config.seed)
    labels = np.empty(len(state["train_poses"]), dtype=np.int64)
    for g in groups:
        labels[g.member_ids] = g.group_id
    pred = coarse_mod.init_place_predictor(
        len(groups), embed_dim=cfg.embed_dim, margin=cfg.margin, scale=cfg.scale,
        image_size=config.scene.image_size, rng_seed=config.seed)
    images = np.stack([img.rgb for img in state["train_images"]])
    pred = coarse_mod.train_place_predictor(pred, images, labels, epochs=cfg.epochs,
                                            lr=cfg.lr, seed=config.seed)
    d = Path(out) / "coarse"
    d.mkdir(parents=True, exist_ok=True)
    coarse_mod.save_pose_groups(groups, d / "pose_groups.json")
    np.savez(d / "predictor.npz", **pred.arrays)
    state.update(pose_groups=groups, place_predictor=pred, group_labels=labels)
    return state


def stage_projector(config, out, state):
    """Train one RGB->feature projector per block (projector query mode only)."""
    if config.query_mode != "projector":
        state.update(projectors=None)
        return state
    part = state["partition"]
    intr = state["intrinsics"]
    d = Path(out) / "projector"
    d.mkdir(parents=True, exist_ok=True)
    projectors = {}
    for block in range(part.n_blocks):
        member_ids = sorted(i for i, b in part.allocation.items() if b == block)
        rng = np.random.default_rng([config.seed, 97, block])
        chosen = rng.permutation(member_ids)[:config.projector.max_train_images]
        mask = state["masks"][block]
        images, targets = [], []
        grid = config.scene.image_size // config.matching.stride
        for pose_id in chosen:
            rendered = renderer_mod.render_map(
                state["fields"][block], state["train_poses"][pose_id], intr,
                stride=config.matching.stride, selection=mask,
                n_samples=config.matching.n_samples, compute_color=False)
            images.append(state["train_images"][pose_id].rgb)
            targets.append(rendered.features.reshape(grid, grid, -1))
        out_dim = targets[0].shape[-1]
        proj = matcher_mod.init_projector(out_dim, config.matching.stride,
                                          config.scene.image_size,
                                          rng_seed=config.seed + block)
        proj = matcher_mod.train_projector(
            np.stack(images), np.stack(targets), proj,
            epochs=config.projector.epochs, lr=config.projector.lr,
            batch=config.projector.batch, seed=config.seed + block)
        np.savez(d / f"projector_block{block}.npz", target_mean=proj.target_mean,
                 target_std=proj.target_std, **proj.arrays)
        projectors[block] = proj
    state.update(projectors=projectors)
    return state


def localize_query(config, state, query_image, query_pose, query_id=""):
    """Coarse-predict, render-and-lift, match, and solve one query.

    Returns a record dict with the estimate, error, and per-stage timings.
    On RANSAC failure the coarse representative pose is returned, flagged.
    """
    intr = state["intrinsics"]
    part = state["partition"]
    t_begin = time.perf_counter()
    t0 = time.perf_counter()
    group_id, confidence = coarse_mod.predict_place(state["place_predictor"],
                                                    query_image.rgb)
    group = state["pose_groups"][group_id]
    init = coarse_mod.initial_pose(group)
    block = part.allocation[group.representative_id]
    t_coarse = time.perf_counter() - t0

    mask = state["masks"][block]
    t0 = time.perf_counter()
    rendered = renderer_mod.render_map(
        state["fields"][block], init, intr, stride=config.matching.stride,
        selection=mask, n_samples=config.matching.n_samples, compute_color=False)
    cloud = renderer_mod.lift_to_3d(rendered, min_acc=config.matching.lift_min_acc)
    t_render = time.perf_counter() - t0

    if config.query_mode == "oracle":
        query_feats = matcher_mod.extract_query_features(
            query_image.rgb, None, mask, mode="oracle",
            field_params=state["fields"][block], pose=query_pose, intrinsics=intr,
            stride=config.matching.stride, n_samples=config.matching.n_samples,
            source_id=str(query_id))
    else:
        query_feats = matcher_mod.extract_query_features(
            query_image.rgb, state["projectors"][block], mask, mode="projector",
            source_id=str(query_id))

    t0 = time.perf_counter()
    corr = matcher_mod.match(query_feats, cloud)
    t_match = time.perf_counter() - t0

    record = {
        "query_id": str(query_id),
        "coarse_group": int(group_id),
        "coarse_confidence": confidence,
        "block": int(block),
        "num_matches": len(corr),
        "failed": False,
    }
    t0 = time.perf_counter()
    try:
        init_frame = matcher_mod.Correspondences(
            pixels=corr.pixels, points=init.inverse_transform(corr.points),
            scores=corr.scores)
        est = pnp_mod.ransac_pnp(init_frame, intr, pnp_mod.RansacConfig(
            max_iterations=config.ransac.max_iterations,
            threshold_px=config.ransac.threshold_px,
            confidence=config.ransac.confidence,
            rng_seed=config.seed))
        final = pnp_mod.compose_with_initial(est, init)
        record["num_inliers"] = int(len(est.inliers))
        record["mean_reproj_error"] = est.mean_error
    except (LocalizationFailure, ValueError):
        final = init
        record["failed"] = True
        record["num_inliers"] = 0
        record["mean_reproj_error"] = None
    t_pnp = time.perf_counter() - t0

    trans_err, rot_err = pose_error(final, query_pose)
    record.update(trans_err=trans_err, rot_err=rot_err,
                  pose=final.flat().tolist(),
                  timings={"coarse": t_coarse, "feature_render": t_render,
                           "match": t_match, "ransac_pnp": t_pnp},
                  wall_clock=time.perf_counter() - t_begin)
    return record, corr


def stage_localize(config, out, state):
    d = Path(out) / "localize"
    d.mkdir(parents=True, exist_ok=True)
    records = []
    for i, (img, pose) in enumerate(zip(state["query_images"], state["query_poses"])):
        record, corr = localize_query(config, state, img, pose, query_id=f"{i:03d}")
        matcher_mod.save_correspondences(corr, d / f"query_{i:03d}.csv")
        records.append(record)
    with open(d / "records.json", "w") as f:
        json.dump(records, f, indent=1)
    state.update(records=records)
    return state


def stage_evaluate(config, out, state):
    intr = state["intrinsics"]
    part = state["partition"]
    records = state["records"]

    psnrs = []
    for img, record in zip(state["query_images"], records):
        rendered = renderer_mod.render_map(
            state["fields"][record["block"]], img.pose, intr, stride=1,
            n_samples=config.matching.n_samples)
        h, w = intr.height, intr.width
        psnrs.append(psnr(rendered.colors.reshape(h, w, 3), img.rgb))

    sampler = state.get("sampler") or partition_mod.SamplerConfig(
        config.partition.pixel_stride, config.partition.n_samples)
    grid_part = partition_mod.grid_partition(state["scene"].bounds,
                                             config.partition.grid_cells)
    num_pose_aware = [partition_mod.num_nerf(p, part, intr, sampler)
                      for p in state["train_poses"]]
    num_grid = [partition_mod.num_nerf(p, grid_part, intr, sampler)
                for p in state["train_poses"]]
    clouds = [partition_mod.PosePointCloud(
        i, partition_mod._sample_positions(p, intr, state["scene"].bounds, sampler))
        for i, p in enumerate(state["train_poses"])]
    compact = partition_mod.compactness(part, clouds)
    t_single, t_routed = partition_render_times(
        state["fields"][0], state["train_poses"][0], intr, grid_part)

    ok = [r for r in records if not r["failed"]]
    report = {
        "schema_version": SCHEMA_VERSION,
        "query_mode": config.query_mode,
        "per_query": records,
        "median_trans_err": float(np.median([r["trans_err"] for r in ok])) if ok else None,
        "median_rot_err": float(np.median([r["rot_err"] for r in ok])) if ok else None,
        "n_success": len(ok),
        "n_failures": len(records) - len(ok),
        "psnr_per_query": psnrs,
        "psnr_mean": float(np.mean(psnrs)),
        "scene_extent": state["scene"].extent(),
        "partition_stats": {
            "n_blocks": part.n_blocks,
            "avg_num_nerf_pose_aware": float(np.mean(num_pose_aware)),
            "avg_num_nerf_grid": float(np.mean(num_grid)),
            "compactness": {str(k): v for k, v in compact.items()},
            "eval_time_single_s": t_single,
            "eval_time_grid_routed_s": t_routed,
        },
    }
    out = Path(out)
    with open(out / "report.json", "w") as f:
        json.dump(report, f, indent=1)
    with open(out / "report.txt", "w") as f:
        f.write(format_report(report))
    with open(out / "timings.csv", "w") as f:
        f.write(timing_breakdown(report))
    state.update(report=report)
    return state


STAGES = [
    ("scene", stage_scene),
    ("partition", stage_partition),
    ("train", stage_train),
    ("select", stage_select),
    ("coarse", stage_coarse),
    ("projector", stage_projector),
    ("localize", stage_localize),
    ("evaluate", stage_evaluate),
]


def run_stages(config: PipelineConfig, out, last=None) -> dict:
    """Execute stages in order through ``last`` (default: all); returns the
    pipeline state. A failure raises StageError naming the stage; artifacts
    persisted by completed stages remain on disk."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.json")
    state = {}
    for name, fn in STAGES:
        try:
            state = fn(config, out, state)
        except Exception as exc:
            raise StageError(name, f"stage '{name}' failed: {exc}") from exc
        if name == last:
            break
    return state


def run_pipeline(config: PipelineConfig, out) -> dict:
    """Execute all stages in order; returns the evaluation report dict."""
    return run_stages(config, out)["report"]


def format_report(report) -> str:
    lines = ["query  trans_err  rot_err  matches  inliers  failed"]
    for r in report["per_query"]:
        lines.append(f"{r['query_id']:>5}  {r['trans_err']:9.4f}  {r['rot_err']:7.3f}"
                     f"  {r['num_matches']:7d}  {r['num_inliers']:7d}  {str(r['failed']):>6}")
    lines.append("")
    lines.append(f"median translation error: {report['median_trans_err']}")
    lines.append(f"median rotation error:    {report['median_rot_err']}")
    lines.append(f"failures:                 {report['n_failures']}")
    lines.append(f"mean held-out PSNR (dB):  {report['psnr_mean']:.2f}")
    stats = report["partition_stats"]
    lines.append(f"avg sub-fields touched:   pose-aware {stats['avg_num_nerf_pose_aware']:.2f}"
                 f" vs grid {stats['avg_num_nerf_grid']:.2f}")
    return "\n".join(lines) + "\n"


def timing_breakdown(report) -> str:
    """Per-query stage timings as CSV."""
    rows = ["query,coarse,feature_render,match,ransac_pnp,total"]
    for r in report["per_query"]:
        t = r["timings"]
        rows.append(f"{r['query_id']},{t['coarse']:.6f},{t['feature_render']:.6f},"
                    f"{t['match']:.6f},{t['ransac_pnp']:.6f},{r['wall_clock']:.6f}")
    return "\n".join(rows) + "\n"
