"""Frame-by-frame driver: initialise, track, create keyframes, export the map."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..evaluation.cloud import PointCloud, write_map, write_ply
from ..geometry import Pose
from ..tracking import Tracker, TrackerConfig, TrackingLost, TrackingResult, predict_pose
from .config import PipelineConfig
from .keyframes import anchor_scale, create_keyframe, export_map, keyframe_decision
from .mono_init import initialize_mono
from .stereo import initialize_stereo
from .window import InitializationFailed, KeyframeCreationFailed, SlidingWindowState

log = logging.getLogger(__name__)


@dataclass
class KeyframeRecord:
    keyframe_id: int
    frame_id: int
    creation_ms: float
    bootstrap: bool = False


@dataclass
class FrameRecord:
    frame_id: int
    tracking_ms: float
    cost: float
    valid_fraction: float
    is_keyframe: bool
    is_post_keyframe: bool


@dataclass
class PipelineResult:
    mode: str
    state: SlidingWindowState | None
    map: PointCloud
    keyframes: list[KeyframeRecord] = field(default_factory=list)
    frames: list[FrameRecord] = field(default_factory=list)
    trajectory: dict[int, Pose] = field(default_factory=dict)
    init_partner: int | None = None
    lost_at: int | None = None
    lost_reason: str = ""
    failed_keyframes: int = 0
    max_window: int = 0

    @property
    def keyframe_ids(self) -> list[int]:
        return [k.frame_id for k in self.keyframes]

    @property
    def completed(self) -> bool:
        return self.state is not None and self.lost_at is None


def tracker_config(config: PipelineConfig) -> TrackerConfig:
    return TrackerConfig(levels=config.pyramid_levels, max_iterations=config.tracking_iterations,
                         gamma=config.huber_gamma, affine_prior=config.tracking_affine_prior)


def _bootstrap(seq, config, rng):
    """Initial window and the frame index tracking resumes from."""
    intr = seq.rig.left
    first = seq.frame(0)
    if config.stereo:
        state = initialize_stereo(first, None, seq.rig, config)
        return state, 1, None, [Pose.identity()]
    t0 = time.perf_counter()
    last_err = None
    for k in range(1, min(config.init_max_attempts, len(seq) - 1) + 1):
        first = seq.frame(0)
        try:
            state = initialize_mono(first, seq.frame(k), config, rng, intr=intr)
        except InitializationFailed as exc:
            last_err = exc
            log.debug("initialisation with frame %d failed: %s", k, exc)
            continue
        state.keyframes[0].creation_duration = max(time.perf_counter() - t0, 1e-9)
        anchor_scale(state.keyframes[0])
        T = state.bootstrap_pose
        step = Pose.exp(T.log() / k)
        return state, k + 1, k, [T @ step.inverse(), T]
    raise InitializationFailed(f"no initialisation within {config.init_max_attempts} frames: {last_err}")


def run_pipeline(seq, config: PipelineConfig, progress=None) -> PipelineResult:
    """Run one odometry pass over a :class:`~dsobench.dataset.DatasetSequence`."""
    rng = np.random.default_rng(config.seed)
    state, start, partner, history = _bootstrap(seq, config, rng)
    kf0 = state.keyframes[0]
    res = PipelineResult(config.mode, state, PointCloud.empty("map"), init_partner=partner)
    res.keyframes.append(KeyframeRecord(kf0.id, kf0.frame.id, kf0.creation_duration * 1e3, True))
    res.trajectory[0] = kf0.pose
    if partner is not None:
        res.trajectory[partner] = history[-1]
    res.max_window = len(state)
    tracker = Tracker(state.intrinsics, tracker_config(config), config.tracking_mode)
    tracker.set_reference(state)
    post = config.stereo      # the frame after the initial stereo keyframe
    affine = (kf0.frame.affine_a, kf0.frame.affine_b)
    for k in range(start, len(seq)):
        frame = seq.frame(k)
        guess = predict_pose(history[-2:])
        try:
            result: TrackingResult = tracker.track(frame, guess, affine, is_post_keyframe=post)
        except TrackingLost as exc:
            res.lost_at, res.lost_reason = k, str(exc)
            log.warning("tracking lost at frame %d: %s", k, exc)
            break
        affine = (result.affine_a, result.affine_b)
        is_kf = False
        if keyframe_decision(result, state.newest, config):
            try:
                kf = create_keyframe(state, frame, result, seq.rig, config)
            except KeyframeCreationFailed as exc:
                res.failed_keyframes += 1
                log.warning("keyframe at frame %d demoted: %s", k, exc)
            else:
                is_kf = True
                res.keyframes.append(KeyframeRecord(kf.id, k, kf.creation_duration * 1e3))
                res.max_window = max(res.max_window, len(state))
                tracker.set_reference(state)
        res.frames.append(FrameRecord(k, result.duration * 1e3, result.final_cost,
                                      result.valid_residual_fraction, is_kf, post))
        pose = state.newest.pose if is_kf else result.pose
        res.trajectory[k] = pose
        history.append(pose)
        post = is_kf
        if progress:
            progress(k, len(seq))
    for kf in state.keyframes:
        res.trajectory[kf.frame.id] = kf.pose
    res.map = export_map(state, config)
    return res


# --------------------------------------------------------------------------
# output files


def write_results(res: PipelineResult, out) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_map(out / "map.pcd", res.map)
    write_ply(out / "map.ply", res.map)
    with open(out / "keyframes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["keyframe_id", "frame_id", "creation_ms", "bootstrap"])
        for r in res.keyframes:
            w.writerow([r.keyframe_id, r.frame_id, f"{r.creation_ms:.4f}", int(r.bootstrap)])
    with open(out / "tracking.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame_id", "tracking_ms", "cost", "valid_fraction", "is_keyframe", "is_post_keyframe"])
        for r in res.frames:
            w.writerow([r.frame_id, f"{r.tracking_ms:.4f}", f"{r.cost:.9g}", f"{r.valid_fraction:.6f}",
                        int(r.is_keyframe), int(r.is_post_keyframe)])
    with open(out / "trajectory.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "tx", "ty", "tz", "qw", "qx", "qy", "qz"])
        for k in sorted(res.trajectory):
            T = res.trajectory[k]
            w.writerow([k, *(f"{v:.17g}" for v in T.translation), *(f"{v:.17g}" for v in T.quaternion_wxyz())])
    summary = {
        "mode": res.mode,
        "frames_tracked": len(res.frames),
        "keyframes": len(res.keyframes),
        "map_points": len(res.map),
        "init_partner": "" if res.init_partner is None else res.init_partner,
        "lost_at": "" if res.lost_at is None else res.lost_at,
        "lost_reason": res.lost_reason,
        "failed_keyframes": res.failed_keyframes,
        "max_window": res.max_window,
    }
    (out / "run.txt").write_text("".join(f"{k}={v}\n" for k, v in summary.items()))


def read_trajectory(path) -> dict[int, Pose]:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            q = [float(row[c]) for c in ("qw", "qx", "qy", "qz")]
            t = [float(row[c]) for c in ("tx", "ty", "tz")]
            out[int(row["frame"])] = Pose.from_quaternion(q, t)
    return out
