"""Shared fixtures: tiny synthetic scenes and prepared pipeline inputs."""

import numpy as np
import pytest
import torch

from svnvs import geometry, scene_io

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_scene():
    """Two-plane scene at thumbnail resolution, 4 views."""
    layout = scene_io.preset_layout("two_planes", image_size=(24, 32))
    return scene_io.generate_synthetic_scene(layout, n_views=4, seed=3, name="tiny")


@pytest.fixture(scope="session")
def tiny_planes(tiny_scene):
    d_min, d_max = tiny_scene.manifest.depth_range
    return geometry.sample_depth_planes(d_min, d_max, 4)


@pytest.fixture(scope="session")
def tiny_prepared(tiny_scene, tiny_planes):
    from svnvs import pipeline

    manifest = tiny_scene.manifest
    target = manifest.views[0]
    sources = scene_io.select_source_views(manifest, target.id, 2)
    return pipeline.prepare_views(target, sources, tiny_planes)


def random_cameras(seed, width=20, height=16):
    """A target/source camera pair with a small random relative motion."""
    rng = np.random.default_rng(seed)
    intr = scene_io.CameraIntrinsics(
        fx=30.0, fy=30.0, cx=(width - 1) / 2, cy=(height - 1) / 2,
        width=width, height=height,
    )
    target = scene_io.CameraPose(
        rotation=np.eye(3), translation=np.zeros(3))
    angle = rng.uniform(-0.08, 0.08)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    k_mat = np.array([
        [0, -axis[2], axis[1]],
        [axis[2], 0, -axis[0]],
        [-axis[1], axis[0], 0],
    ])
    rot = np.eye(3) + np.sin(angle) * k_mat + (1 - np.cos(angle)) * (k_mat @ k_mat)
    trans = rng.uniform(-0.1, 0.1, size=3)
    source = scene_io.CameraPose(rotation=rot, translation=trans)
    return intr, target, source
