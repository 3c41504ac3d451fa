"""Synthetic stereo RGB-D sequences and their on-disk format."""

from __future__ import annotations

import numpy as np

from ..geometry import CameraIntrinsics, StereoRig
from .io import DatasetError, DatasetSequence, load_sequence, save_sequence
from .render import RenderError, render_frame, render_view
from .scene import Scene, SceneConfig, generate_scene
from .trajectory import TrajectoryConfig, sample_trajectory


def reference_rig() -> StereoRig:
    """640x480 rectified pair, 34 cm baseline."""
    return StereoRig(0.34, CameraIntrinsics(500.0, 500.0, 319.5, 239.5, 640, 480, 6e-6))


def reference_scene_config() -> SceneConfig:
    return SceneConfig()


def reference_trajectory_config() -> TrajectoryConfig:
    return TrajectoryConfig(max_frames=200)


def to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def generate_sequence(scene: Scene, traj: TrajectoryConfig, rig: StereoRig,
                      noise_sigma: float = 0.0, progress=None) -> DatasetSequence:
    for wp in traj.waypoints:
        z = wp[2] if len(wp) > 2 else traj.altitude
        if z <= scene.height_at(wp[0], wp[1]):
            raise RenderError(f"waypoint {wp} is below the terrain")
    poses, times = sample_trajectory(traj)
    n = len(poses)
    H, W = rig.left.height, rig.left.width
    left = np.empty((n, H, W), np.uint8)
    right = np.empty((n, H, W), np.uint8)
    depth = np.empty((n, H, W), np.float32)
    for k, pose in enumerate(poses):
        x, y, z = pose.translation
        if z <= scene.height_at(x, y):
            raise RenderError(f"frame {k} pose is below the terrain")
        rng = np.random.default_rng([scene.config.seed, k]) if noise_sigma > 0 else None
        l, r, d = render_frame(scene, pose, rig, noise_sigma, rng)
        left[k], right[k], depth[k] = to_uint8(l), to_uint8(r), d
        if progress:
            progress(k, n)
    return DatasetSequence(rig, left, right, depth, poses, times)


__all__ = [
    "DatasetError", "DatasetSequence", "RenderError", "Scene", "SceneConfig", "TrajectoryConfig",
    "generate_scene", "generate_sequence", "load_sequence", "reference_rig",
    "reference_scene_config", "reference_trajectory_config", "render_frame", "render_view",
    "sample_trajectory", "save_sequence",
]
