"""Shared fixtures. The trained plane field is expensive, so it is built once
per session and reused by every module that needs believable geometry."""

from types import SimpleNamespace

import numpy as np
import pytest

from nerfloc.field import FieldConfig, TrainConfig, init_field, train
from nerfloc.synthscene import default_intrinsics, make_trajectory, plane_scene, raytrace

QUICK_TRAIN = TrainConfig(steps=1200, batch_rays=256, n_samples=24, seed=0)


def constant_field(sigma_value, color, bounds, config=None):
    """A field rigged to output a constant density and color everywhere."""
    params = init_field(config or FieldConfig(l_pos=2, d_pos=6, l_dir=1,
                                              trunk_width=8, trunk_depth=2, d_mlp=4),
                        bounds, rng_seed=0)
    for i in range(params.config.trunk_depth):
        params.arrays[f"w{i}"][:] = 0.0
        params.arrays[f"b{i}"][:] = 0.0
    params.arrays["w_feat"][:] = 0.0
    params.arrays["b_feat"][:] = 0.0
    params.arrays["w_density"][:] = 0.0
    # softplus(b) = sigma  =>  b = log(exp(sigma) - 1)
    params.arrays["b_density"][:] = np.log(np.expm1(sigma_value))
    params.arrays["w_color"][:] = 0.0
    c = np.clip(np.asarray(color, dtype=np.float64), 1e-9, 1 - 1e-9)
    params.arrays["b_color"][:] = np.log(c / (1.0 - c))
    return params


@pytest.fixture(scope="session")
def plane_run():
    """Checker plane scene with a field trained well enough for geometry tests."""
    scene = plane_scene()
    intr = default_intrinsics(32)
    poses = make_trajectory(scene, "ring", 12)
    images = [raytrace(scene, p, intr) for p in poses]
    params = init_field(FieldConfig(), scene.bounds, rng_seed=0)
    trained, losses = train(params, images, QUICK_TRAIN)
    return SimpleNamespace(scene=scene, intrinsics=intr, poses=poses, images=images,
                           params=trained, losses=losses)
