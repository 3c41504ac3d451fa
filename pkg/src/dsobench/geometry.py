"""Pinhole cameras, rigid and similarity transforms, rectified stereo depth.

Conventions used throughout the package:

* image origin at the centre of the top-left pixel, ``u`` is the column and
  ``v`` the row;
* camera frame x right, y down, z forward;
* ``Pose`` objects stored on frames and keyframes are camera-to-world;
* twists are ordered ``(v, omega)`` (translation first) and poses are
  perturbed through the SE(3) exponential map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .keyvalue import ConfigError, format_keyvalue, parse_keyvalue, require


class GeometryError(ValueError):
    pass


class BehindCameraError(GeometryError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pixel_size: float = 1e-5  # metres, metadata only

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, level: int) -> "CameraIntrinsics":
        """Intrinsics of pyramid ``level`` built by repeated 2x2 box filtering.

        A level-(k+1) pixel centre sits at ``2u + 0.5`` in level-k coordinates.
        """
        fx, fy, cx, cy = self.fx, self.fy, self.cx, self.cy
        w, h = self.width, self.height
        for _ in range(level):
            fx, fy = fx / 2.0, fy / 2.0
            cx, cy = (cx - 0.5) / 2.0, (cy - 0.5) / 2.0
            w, h = (w + 1) // 2, (h + 1) // 2
        return CameraIntrinsics(fx, fy, cx, cy, w, h, self.pixel_size * 2**level)

    def in_bounds(self, uv: np.ndarray, margin: float = 0.0) -> np.ndarray:
        uv = np.asarray(uv)
        u, v = uv[..., 0], uv[..., 1]
        return (
            (u >= margin)
            & (v >= margin)
            & (u <= self.width - 1 - margin)
            & (v <= self.height - 1 - margin)
        )

    @property
    def focal_length_m(self) -> float:
        return self.fx * self.pixel_size


# --------------------------------------------------------------------------
# SO(3) / SE(3) helpers


def hat(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def hat_batch(w: np.ndarray) -> np.ndarray:
    """Skew matrices for an ``(..., 3)`` array."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def so3_exp(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    theta2 = float(w @ w)
    W = hat(w)
    if theta2 < 1e-12:
        return np.eye(3) + W + 0.5 * W @ W
    theta = math.sqrt(theta2)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta2
    return np.eye(3) + a * W + b * W @ W


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Nearest rotation matrix (SVD projection)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R x + t``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, M: np.ndarray) -> "Pose":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_quaternion(cls, q_wxyz, t) -> "Pose":
        qw, qx, qy, qz = q_wxyz
        return cls(Rotation.from_quat([qx, qy, qz, qw]).as_matrix(), t)

    @classmethod
    def exp(cls, twist: np.ndarray) -> "Pose":
        twist = np.asarray(twist, dtype=float)
        v, w = twist[:3], twist[3:]
        theta2 = float(w @ w)
        W = hat(w)
        R = so3_exp(w)
        if theta2 < 1e-12:
            V = np.eye(3) + 0.5 * W + W @ W / 6.0
        else:
            theta = math.sqrt(theta2)
            V = (
                np.eye(3)
                + (1.0 - math.cos(theta)) / theta2 * W
                + (theta - math.sin(theta)) / (theta2 * theta) * W @ W
            )
        return cls(R, V @ v)

    def log(self) -> np.ndarray:
        w = Rotation.from_matrix(self.rotation).as_rotvec()
        theta2 = float(w @ w)
        W = hat(w)
        if theta2 < 1e-12:
            Vinv = np.eye(3) - 0.5 * W + W @ W / 12.0
        else:
            theta = math.sqrt(theta2)
            c = (1.0 - theta * math.sin(theta) / (2.0 * (1.0 - math.cos(theta)))) / theta2
            Vinv = np.eye(3) - 0.5 * W + c * W @ W
        return np.concatenate([Vinv @ self.translation, w])

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def quaternion_wxyz(self) -> np.ndarray:
        qx, qy, qz, qw = Rotation.from_matrix(self.rotation).as_quat()
        q = np.array([qw, qx, qy, qz])
        return q if qw >= 0 else -q

    def inverse(self) -> "Pose":
        Rt = self.rotation.T
        return Pose(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "Pose") -> "Pose":
        if not isinstance(other, Pose):
            return NotImplemented
        R = self.rotation @ other.rotation
        # one Newton step towards the polar factor keeps long products orthonormal
        R = 1.5 * R - 0.5 * R @ R.T @ R
        return Pose(R, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def adjoint(self) -> np.ndarray:
        """6x6 adjoint for ``(v, omega)`` twists: ``T exp(x) = exp(Ad x) T``."""
        R, t = self.rotation, self.translation
        A = np.zeros((6, 6))
        A[:3, :3] = R
        A[:3, 3:] = hat(t) @ R
        A[3:, 3:] = R
        return A

    def orthonormalized(self) -> "Pose":
        return Pose(orthonormalize(self.rotation), self.translation)

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return (
            np.abs(R.T @ R - np.eye(3)).max() < tol
            and abs(np.linalg.det(R) - 1.0) < tol
            and bool(np.all(np.isfinite(self.translation)))
        )

    def rotation_angle(self) -> float:
        """Rotation magnitude in radians."""
        c = (np.trace(self.rotation) - 1.0) / 2.0
        return float(math.acos(min(1.0, max(-1.0, c))))

    def __repr__(self):
        return f"Pose(t={np.round(self.translation, 6).tolist()}, angle={self.rotation_angle():.6f})"


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """``x -> s (R x) + t``; reduces to the pose when ``scale == 1``."""

    scale: float = 1.0
    pose: Pose = field(default_factory=Pose)

    def __post_init__(self):
        if not self.scale > 0:
            raise GeometryError("similarity scale must be positive")

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if self.scale == 1.0:
            return self.pose.apply(points)
        return self.scale * (points @ self.pose.rotation.T) + self.pose.translation

    def __matmul__(self, other: "SimilarityTransform") -> "SimilarityTransform":
        R1, t1, s1 = self.pose.rotation, self.pose.translation, self.scale
        R2, t2, s2 = other.pose.rotation, other.pose.translation, other.scale
        return SimilarityTransform(s1 * s2, Pose(R1 @ R2, s1 * R1 @ t2 + t1))

    @property
    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.scale * self.pose.rotation
        M[:3, 3] = self.pose.translation
        return M


@dataclass(frozen=True)
class StereoRig:
    """Rectified stereo pair; the right camera sits ``baseline`` metres along +x."""

    baseline: float
    left: CameraIntrinsics
    right: CameraIntrinsics | None = None

    def __post_init__(self):
        if not self.baseline > 0:
            raise GeometryError("baseline must be positive")
        if self.right is None:
            object.__setattr__(self, "right", self.left)
        r, l = self.right, self.left
        if (r.fx, r.fy, r.cy) != (l.fx, l.fy, l.cy):
            raise GeometryError("rectified pair needs identical fx, fy, cy")

    @property
    def left_to_right(self) -> Pose:
        """Transform of left-camera coordinates into right-camera coordinates."""
        return Pose(np.eye(3), [-self.baseline, 0.0, 0.0])

    @property
    def bf(self) -> float:
        return self.baseline * self.left.fx


# --------------------------------------------------------------------------
# projection


def project(point, intr: CameraIntrinsics) -> np.ndarray:
    x, y, z = np.asarray(point, dtype=float)
    if not z > 0:
        raise BehindCameraError("behind camera")
    return np.array([intr.fx * x / z + intr.cx, intr.fy * y / z + intr.cy])


def backproject(pixel, inverse_depth: float, intr: CameraIntrinsics) -> np.ndarray:
    if not inverse_depth > 0:
        raise GeometryError("invalid inverse depth")
    u, v = pixel
    ray = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    return ray / inverse_depth


def project_points(points: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Vectorised projection; no depth check (callers mask ``z > 0``)."""
    points = np.asarray(points, dtype=float)
    z = points[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * points[..., 0] / z + intr.cx
        v = intr.fy * points[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1)


def pixel_rays(pixels: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Unit-z rays ``K^-1 [u v 1]`` for an ``(..., 2)`` pixel array."""
    pixels = np.asarray(pixels, dtype=float)
    return np.stack(
        [
            (pixels[..., 0] - intr.cx) / intr.fx,
            (pixels[..., 1] - intr.cy) / intr.fy,
            np.ones(pixels.shape[:-1]),
        ],
        axis=-1,
    )


def backproject_points(pixels: np.ndarray, inverse_depth: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    return pixel_rays(pixels, intr) / np.asarray(inverse_depth, dtype=float)[..., None]


def relative_pose(T_i: Pose, T_j: Pose) -> Pose:
    """Camera-i to camera-j transform for camera-to-world poses."""
    return T_j.inverse() @ T_i


def transfer_point(p, d_p: float, T_i: Pose, T_j: Pose, intr: CameraIntrinsics) -> tuple[np.ndarray, bool]:
    """Pixel ``p`` with inverse depth ``d_p`` in frame i, seen from frame j.

    ``T_i`` and ``T_j`` are camera-to-world.  Returns the transferred pixel and
    whether it falls inside the image.
    """
    rel = relative_pose(T_i, T_j)
    X = rel.apply(backproject(p, d_p, intr))
    if not X[2] > 0:
        raise BehindCameraError("not visible")
    uv = project(X, intr)
    return uv, bool(intr.in_bounds(uv))


# --------------------------------------------------------------------------
# stereo depth


def stereo_depth(disparity, rig: StereoRig):
    d = np.asarray(disparity, dtype=float)
    if np.any(d <= 0):
        raise GeometryError("non-positive disparity")
    out = rig.bf / d
    return float(out) if out.ndim == 0 else out


def disparity_from_depth(depth, rig: StereoRig):
    z = np.asarray(depth, dtype=float)
    if np.any(z <= 0):
        raise GeometryError("non-positive depth")
    out = rig.bf / z
    return float(out) if out.ndim == 0 else out


def depth_error_bound(depth: float, rig: StereoRig) -> tuple[float, float]:
    """Depth deviation caused by a +-1 px disparity error.

    Returns ``(lower, upper)``; ``upper`` is ``inf`` once the disparity is
    at or below one pixel.
    """
    if not depth > 0:
        raise GeometryError("non-positive depth")
    disp = rig.bf / depth
    lower = depth - rig.bf / (disp + 1.0)
    upper = math.inf if disp <= 1.0 else rig.bf / (disp - 1.0) - depth
    return lower, upper


# --------------------------------------------------------------------------
# calibration file

CALIB_KEYS = ["fx", "fy", "cx", "cy", "width", "height", "pixel_size", "baseline"]


def format_calibration(rig: StereoRig) -> str:
    c = rig.left
    return format_keyvalue(
        {
            "fx": repr(c.fx),
            "fy": repr(c.fy),
            "cx": repr(c.cx),
            "cy": repr(c.cy),
            "width": c.width,
            "height": c.height,
            "pixel_size": repr(c.pixel_size),
            "baseline": repr(rig.baseline),
        }
    )


def parse_calibration(text: str, source: str = "calib") -> StereoRig:
    kv = parse_keyvalue(text, source)
    require(kv, CALIB_KEYS, source)
    try:
        intr = CameraIntrinsics(
            float(kv["fx"]),
            float(kv["fy"]),
            float(kv["cx"]),
            float(kv["cy"]),
            int(kv["width"]),
            int(kv["height"]),
            float(kv["pixel_size"]),
        )
        return StereoRig(float(kv["baseline"]), intr)
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def read_calibration(path: str | Path) -> StereoRig:
    path = Path(path)
    return parse_calibration(path.read_text(), str(path))


def write_calibration(path: str | Path, rig: StereoRig) -> None:
    Path(path).write_text(format_calibration(rig))
