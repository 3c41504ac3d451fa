"""Keyframes, their active points, and the sliding window."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import CameraIntrinsics, Pose, StereoRig, backproject_points, project_points
from ..photometric import DSO_PATTERN, CandidatePoint, Frame, HostPatch, PointStatus
from ..tracking import ReferenceView

# compact status codes for the point arrays
CANDIDATE, ACTIVE, MARGINALIZED, DROPPED = 0, 1, 2, 3
_STATUS = {CANDIDATE: PointStatus.CANDIDATE, ACTIVE: PointStatus.ACTIVE,
           MARGINALIZED: PointStatus.MARGINALIZED, DROPPED: PointStatus.DROPPED}


class BackendError(RuntimeError):
    pass


class InitializationFailed(BackendError):
    pass


class BundleAdjustmentError(BackendError):
    pass


@dataclass(eq=False)
class Keyframe:
    id: int
    frame: Frame
    pose: Pose
    intrinsics: CameraIntrinsics
    pix: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    idepth: np.ndarray = field(default_factory=lambda: np.zeros(0))
    creation_duration: float = 0.0
    rig: StereoRig | None = None

    def __post_init__(self):
        n = len(self.pix)
        self.pix = np.asarray(self.pix, dtype=float).reshape(n, 2)
        self.idepth = np.asarray(self.idepth, dtype=float).reshape(n)
        self.status = np.full(n, ACTIVE, dtype=np.int8)
        self.hdd = np.zeros(n)                 # depth information from the last optimisation
        self.n_obs = np.ones(n, dtype=np.int64)  # host + inlier targets, running maximum
        self.prior_idepth = np.full(n, np.nan)
        self.prior_weight = np.zeros(n)
        self.blacklist: dict[int, np.ndarray] = {}   # target keyframe id -> outlier mask
        self._patch: HostPatch | None = None
        self._right: Frame | None = None
        self.color = self.patch.values[:, _centre_index()] if n else np.zeros(0)

    # -- derived data ----------------------------------------------------------

    @property
    def patch(self) -> HostPatch:
        if self._patch is None or len(self._patch.pix) != len(self.pix):
            self._patch = HostPatch.from_frame(self.frame, self.pix, DSO_PATTERN.offsets)
        return self._patch

    @property
    def right(self) -> Frame:
        if self._right is None:
            self._right = self.frame.right_frame()
        return self._right

    @property
    def affine(self) -> tuple[float, float, float]:
        return (self.frame.exposure, self.frame.affine_a, self.frame.affine_b)

    @property
    def active(self) -> np.ndarray:
        return self.status == ACTIVE

    @property
    def active_points(self) -> list[CandidatePoint]:
        out = []
        for i in np.flatnonzero(self.active):
            out.append(CandidatePoint(self.frame.id, self.pix[i].copy(), float(self.idepth[i]),
                                      self.variance()[i], PointStatus.ACTIVE))
        return out

    def variance(self, sigma: float = 2.0 / 255.0) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.where(self.hdd > 0, sigma * sigma / np.maximum(self.hdd, 1e-300), np.inf)

    def outliers_for(self, target_id: int) -> np.ndarray:
        if target_id not in self.blacklist:
            self.blacklist[target_id] = np.zeros(len(self.pix), dtype=bool)
        return self.blacklist[target_id]

    def add_points(self, pix: np.ndarray, idepth: np.ndarray, hdd: np.ndarray | None = None) -> None:
        pix = np.asarray(pix, dtype=float).reshape(-1, 2)
        idepth = np.asarray(idepth, dtype=float).reshape(-1)
        m = len(pix)
        self.pix = np.concatenate([self.pix, pix])
        self.idepth = np.concatenate([self.idepth, idepth])
        self.status = np.concatenate([self.status, np.full(m, ACTIVE, np.int8)])
        self.hdd = np.concatenate([self.hdd, np.zeros(m) if hdd is None else hdd])
        self.n_obs = np.concatenate([self.n_obs, np.ones(m, np.int64)])
        self.prior_idepth = np.concatenate([self.prior_idepth, np.full(m, np.nan)])
        self.prior_weight = np.concatenate([self.prior_weight, np.zeros(m)])
        for k in self.blacklist:
            self.blacklist[k] = np.concatenate([self.blacklist[k], np.zeros(m, bool)])
        self._patch = None
        self.color = self.patch.values[:, _centre_index()]

    def world_points(self, mask: np.ndarray | None = None) -> np.ndarray:
        mask = self.active if mask is None else mask
        X = backproject_points(self.pix[mask], self.idepth[mask], self.intrinsics)
        return self.pose.apply(X)

    def reference_view(self) -> ReferenceView:
        m = self.active
        return ReferenceView(self.frame, self.pose, self.pix[m], self.idepth[m])


def _centre_index() -> int:
    return int(np.flatnonzero(np.all(DSO_PATTERN.offsets == 0, axis=1))[0])


@dataclass
class ExportedPoints:
    """Accumulated map: world points with grey values and host-frame depth."""

    points: list = field(default_factory=list)
    colors: list = field(default_factory=list)
    host_depth: list = field(default_factory=list)
    host_keyframe: list = field(default_factory=list)

    def append(self, pts, colors, depth, kf_id):
        self.points.append(np.asarray(pts, float).reshape(-1, 3))
        self.colors.append(np.asarray(colors, float).reshape(-1))
        self.host_depth.append(np.asarray(depth, float).reshape(-1))
        self.host_keyframe.append(np.full(len(depth), kf_id, dtype=np.int64))

    def arrays(self):
        if not self.points:
            return np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0, np.int64)
        return (np.concatenate(self.points), np.concatenate(self.colors),
                np.concatenate(self.host_depth), np.concatenate(self.host_keyframe))


@dataclass
class SlidingWindowState:
    mode: str
    window_size: int
    intrinsics: CameraIntrinsics
    rig: StereoRig | None = None
    keyframes: list[Keyframe] = field(default_factory=list)
    exported: ExportedPoints = field(default_factory=ExportedPoints)
    next_keyframe_id: int = 0
    bootstrap_pose: Pose | None = None   # mono: pose of the second initialisation frame

    def add(self, kf: Keyframe) -> None:
        self.keyframes.append(kf)

    @property
    def newest(self) -> Keyframe:
        return self.keyframes[-1]

    def __len__(self):
        return len(self.keyframes)

    def _tracking_mask(self, kf: Keyframe) -> np.ndarray:
        if self.mode == "mono":
            return kf.active & (kf.hdd > 0)
        return kf.active

    def reference_view(self) -> ReferenceView:
        """Newest keyframe with every usable window point projected into it.

        In mono mode a point is usable once some observation constrains its
        depth; fresh points only carry the depth guessed at keyframe creation.
        """
        ref = self.newest
        Tinv = ref.pose.inverse()
        usable = self._tracking_mask
        m = usable(ref)
        pix, idepth = [ref.pix[m]], [ref.idepth[m]]
        for kf in self.keyframes[:-1]:
            m = usable(kf)
            if not m.any():
                continue
            X = Tinv.apply(kf.world_points(m))
            front = X[:, 2] > 1e-6
            uv = project_points(X[front], self.intrinsics)
            ok = self.intrinsics.in_bounds(uv)
            pix.append(uv[ok])
            idepth.append(1.0 / X[front][ok, 2])
        return ReferenceView(ref.frame, ref.pose, np.concatenate(pix), np.concatenate(idepth))


class KeyframeCreationFailed(BackendError):
    pass
