"""Matching-based visual localization inside a small neural radiance field.

Train a radiance field on a synthetic scene, render its internal features
with depth, select a minimal informative feature subset, match query-image
features against the lifted 3D feature cloud, and recover the camera pose
with P3P inside RANSAC. Pose-aware scene partitioning and clustering-based
coarse pose estimation handle multi-block scenes.
"""

from .geometry import Intrinsics, Pose, Ray, SampleBatch, compose, generate_rays, \
    midpoint_samples, pose_error, stratified_samples
from .field import FieldConfig, FieldParams, PointEval, TrainConfig, eval_point, \
    init_field, load_checkpoint, positional_encode, save_checkpoint, train
from .renderer import LiftedCloud, RayRender, RenderedMap, lift_to_3d, render_map, render_ray
from .selection import MatchPairSet, PerDimCost, SelectionMask, accumulate_costs, \
    brute_force_selection, generate_gt_pairs, solve_selection
from .matcher import Correspondences, QueryFeatureMap, extract_query_features, match
from .pnp import PoseEstimate, RansacConfig, compose_with_initial, ransac_pnp, solve_p3p
from .partition import OccupancyGrid, PosePointCloud, ScenePartition, cluster_poses, \
    compactness, num_nerf, pose_occupancy
from .coarse import PlacePredictor, PoseGroup, arcface_loss, initial_pose, \
    predict_place, two_stage_cluster
from .synthscene import PosedImage, SyntheticScene, default_scene, make_trajectory, raytrace
from .harness import PipelineConfig, psnr, run_pipeline, timing_breakdown

__version__ = "0.1.0"
