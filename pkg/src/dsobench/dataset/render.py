"""Per-pixel ray casting of a :class:`Scene` through a rectified stereo rig."""

from __future__ import annotations

import numpy as np

from ..geometry import CameraIntrinsics, Pose, StereoRig, pixel_rays
from .scene import Scene


class RenderError(ValueError):
    pass


def _pixel_grid(intr: CameraIntrinsics) -> np.ndarray:
    v, u = np.mgrid[0:intr.height, 0:intr.width]
    return np.stack([u, v], axis=-1).reshape(-1, 2).astype(float)


def _cull(scene: Scene, pose: Pose, intr: CameraIntrinsics):
    """Per-solid candidate pixel indices from projected bounding boxes."""
    W, H = intr.width, intr.height
    inv = pose.inverse()
    out = []
    for s in scene.solids:
        lo, hi = s.aabb
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        pc = inv.apply(corners)
        if np.any(pc[:, 2] <= 0.05):
            if np.all(pc[:, 2] <= 0.05):
                out.append(None)
            else:
                out.append(slice(None))
            continue
        u = intr.fx * pc[:, 0] / pc[:, 2] + intr.cx
        v = intr.fy * pc[:, 1] / pc[:, 2] + intr.cy
        u0, u1 = int(np.floor(u.min())) - 1, int(np.ceil(u.max())) + 1
        v0, v1 = int(np.floor(v.min())) - 1, int(np.ceil(v.max())) + 1
        u0, v0 = max(u0, 0), max(v0, 0)
        u1, v1 = min(u1, W - 1), min(v1, H - 1)
        if u0 > u1 or v0 > v1:
            out.append(None)
            continue
        vv, uu = np.mgrid[v0:v1 + 1, u0:u1 + 1]
        out.append((vv * W + uu).ravel())
    return out


def render_view(scene: Scene, pose: Pose, intr: CameraIntrinsics,
                max_range: float = 2000.0) -> tuple[np.ndarray, np.ndarray]:
    """Image and z-depth (0 where nothing is hit) for a camera-to-world pose."""
    origin = pose.translation
    if origin[2] <= 0.0 or scene.is_inside(origin):
        raise RenderError("camera below surface")
    rays_c = pixel_rays(_pixel_grid(intr), intr)          # z = 1 in camera frame
    dirs = rays_c @ pose.rotation.T
    t, albedo = scene.cast(origin, dirs, _cull(scene, pose, intr))
    hit = np.isfinite(t) & (t < max_range)
    img = np.full(len(t), scene.config.sky)
    pts = origin + dirs[hit] * t[hit, None]
    footprint = t[hit] * np.linalg.norm(rays_c[hit], axis=1) / intr.fx
    img[hit] = scene.texture(pts, footprint, albedo[hit])
    depth = np.where(hit, t, 0.0)   # rays have unit z, so t is the z-depth
    shape = (intr.height, intr.width)
    return img.reshape(shape), depth.reshape(shape)


def render_frame(scene: Scene, pose: Pose, rig: StereoRig, noise_sigma: float = 0.0,
                 rng: np.random.Generator | None = None):
    """Left image, right image and left z-depth for the left-camera ``pose``."""
    left, depth = render_view(scene, pose, rig.left)
    right_pose = pose @ rig.left_to_right.inverse()
    right, _ = render_view(scene, right_pose, rig.right)
    if noise_sigma > 0:
        rng = rng or np.random.default_rng(0)
        left = np.clip(left + rng.normal(0.0, noise_sigma, left.shape), 0.0, 1.0)
        right = np.clip(right + rng.normal(0.0, noise_sigma, right.shape), 0.0, 1.0)
    return left, right, depth
