"""Ground-truth map from depth maps and poses, voxel-deduplicated."""

from __future__ import annotations

import numpy as np

from ..geometry import CameraIntrinsics, backproject_points
from .cloud import CloudError, PointCloud

VOXEL = 0.05
_BITS = 21
_OFFSET = 1 << (_BITS - 1)


def _voxel_keys(points: np.ndarray, voxel: float) -> np.ndarray:
    idx = np.floor(points / voxel).astype(np.int64) + _OFFSET
    if idx.size and (idx.min() < 0 or idx.max() >= (1 << _BITS)):
        raise CloudError("scene extent exceeds the voxel key range")
    return (idx[:, 0] << (2 * _BITS)) | (idx[:, 1] << _BITS) | idx[:, 2]


class _VoxelAccumulator:
    """Running per-voxel sums; merges tables lazily to bound memory."""

    def __init__(self, voxel: float, merge_every: int = 8):
        self.voxel = voxel
        self.merge_every = merge_every
        self.parts: list[tuple] = []

    def add(self, pts: np.ndarray, gray: np.ndarray) -> None:
        if len(pts) == 0:
            return
        keys = _voxel_keys(pts, self.voxel)
        self.parts.append(self._reduce(keys, pts, gray, np.ones(len(pts))))
        if len(self.parts) >= self.merge_every:
            self.parts = [self._merge()]

    @staticmethod
    def _reduce(keys, sums, gray, counts):
        uk, inv = np.unique(keys, return_inverse=True)
        S = np.zeros((len(uk), 3))
        np.add.at(S, inv, sums)
        G = np.bincount(inv, gray, minlength=len(uk))
        C = np.bincount(inv, counts, minlength=len(uk))
        return uk, S, G, C

    def _merge(self):
        keys = np.concatenate([p[0] for p in self.parts])
        S = np.concatenate([p[1] for p in self.parts])
        G = np.concatenate([p[2] for p in self.parts])
        C = np.concatenate([p[3] for p in self.parts])
        return self._reduce(keys, S, G, C)

    def cloud(self) -> PointCloud:
        if not self.parts:
            return PointCloud.empty("ground_truth")
        keys, S, G, C = self._merge()
        return PointCloud(S / C[:, None], G / C, "ground_truth")


def fuse_ground_truth(poses, depth_maps, images, intr: CameraIntrinsics, stride: int = 2,
                      voxel: float = VOXEL) -> PointCloud:
    """Back-project every ``stride``-th valid depth pixel into the world.

    Points sharing a ``voxel``-sized cell are replaced by their centroid (with
    the mean grey value), so re-adding a frame does not grow the cloud.
    ``images`` are grey values in [0, 255] (uint8 arrays are fine) or None.
    """
    if stride < 1:
        raise CloudError("stride must be >= 1")
    n = len(poses)
    if len(depth_maps) != n or (images is not None and len(images) != n):
        raise CloudError("poses, depth maps and images differ in length")
    acc = _VoxelAccumulator(voxel)
    vs, us = np.mgrid[0:intr.height:stride, 0:intr.width:stride]
    pix = np.column_stack([us.ravel(), vs.ravel()]).astype(float)
    for k in range(n):
        depth = np.asarray(depth_maps[k], dtype=float)
        if depth.shape != (intr.height, intr.width):
            raise CloudError(f"depth map {k} has shape {depth.shape}")
        z = depth[vs.ravel(), us.ravel()]
        ok = np.isfinite(z) & (z > 0)
        X = backproject_points(pix[ok], 1.0 / z[ok], intr)
        W = poses[k].apply(X)
        if images is None:
            g = np.zeros(ok.sum())
        else:
            g = np.asarray(images[k], dtype=float)[vs.ravel(), us.ravel()][ok]
        acc.add(W, g)
    return acc.cloud()
