"""End-to-end map evaluation and the CSV report files.

Report files (all with a header row):

* ``accuracy.csv``: points, correspondences, mean_m, std_m, scale
* ``keyframes.csv``: total_kfs, min_ms, max_ms, mean_ms, std_ms
* ``tracking.csv``: frames, mean_ms, post_keyframe_frames, post_keyframe_mean_ms, regular_frames, regular_mean_ms
* ``hist_error.csv``: bin_start_m, bin_end_m, count
* ``depth_bins.csv``: bin_start_m, bin_end_m, count, mean_error_m
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..geometry import Pose, SimilarityTransform
from .cloud import PointCloud
from .metrics import (
    DEPTH_BIN,
    DISTANCE_BIN,
    AccuracyStats,
    BinnedErrors,
    TimingStats,
    accuracy_stats,
    depth_binned_errors,
    error_histogram,
)
from .registration import MAX_ITER, RMSE_DELTA, SEARCH_RADIUS, RegistrationResult, icp_align, umeyama

REPORT_FILES = ("accuracy.csv", "keyframes.csv", "tracking.csv", "hist_error.csv", "depth_bins.csv")


@dataclass
class EvaluationReport:
    accuracy: AccuracyStats
    registration: RegistrationResult
    histogram: BinnedErrors
    depth_bins: BinnedErrors | None = None
    timing: TimingStats | None = None


def initial_alignment(trajectory: dict[int, Pose], gt_poses, scale: float = 1.0,
                      anchor: int | None = None) -> SimilarityTransform:
    """Map frame -> GT world, from the anchor frame's GT pose.

    The estimated trajectory is expressed in the anchor camera frame (pose
    identity there); ``scale`` converts estimated units to metres.
    """
    anchor = min(trajectory) if anchor is None else anchor
    est = trajectory[anchor]
    G = gt_poses[anchor] @ est.inverse()
    return SimilarityTransform(scale, G)


def gauge_scale(gt_poses, anchor: int, partner: int) -> float:
    """Metres per unit for a bootstrap normalised to unit translation."""
    rel = gt_poses[anchor].inverse() @ gt_poses[partner]
    return float(np.linalg.norm(rel.translation))


def trajectory_scale(trajectory: dict[int, Pose], gt_poses, frames=None) -> SimilarityTransform:
    """Similarity fit of estimated camera centres onto GT camera centres."""
    frames = sorted(trajectory) if frames is None else list(frames)
    est = np.array([trajectory[k].translation for k in frames])
    gt = np.array([gt_poses[k].translation for k in frames])
    return umeyama(est, gt, with_scale=True)


def evaluate_map(map_cloud: PointCloud, gt_cloud: PointCloud, initial: SimilarityTransform | None = None,
                 with_scale: bool = False, search_radius: float = SEARCH_RADIUS,
                 rmse_delta: float = RMSE_DELTA, max_iter: int = MAX_ITER,
                 distance_bin: float = DISTANCE_BIN, depth_bin: float = DEPTH_BIN) -> EvaluationReport:
    reg = icp_align(map_cloud, gt_cloud, search_radius, rmse_delta, max_iter, with_scale, initial)
    acc = accuracy_stats(reg, len(map_cloud), reg.transform.scale if with_scale else None)
    hist = error_histogram(reg, distance_bin, search_radius)
    bins = depth_binned_errors(reg, map_cloud.depth, depth_bin) if map_cloud.depth is not None else None
    return EvaluationReport(acc, reg, hist, bins)


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def _write(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_report(report: EvaluationReport, out) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    a = report.accuracy
    _write(out / "accuracy.csv", ["points", "correspondences", "mean_m", "std_m", "scale"],
           [[a.n_points, a.n_correspondences, a.mean, a.std,
             a.estimated_scale if a.estimated_scale is not None else 1.0]])
    _write(out / "hist_error.csv", ["bin_start_m", "bin_end_m", "count"],
           [(lo, hi, n) for lo, hi, n, _ in report.histogram.rows()])
    if report.depth_bins is not None:
        _write(out / "depth_bins.csv", ["bin_start_m", "bin_end_m", "count", "mean_error_m"],
               list(report.depth_bins.rows()))
    if report.timing is not None:
        write_timing(report.timing, out)


def write_timing(t: TimingStats, out) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "keyframes.csv", ["total_kfs", "min_ms", "max_ms", "mean_ms", "std_ms"],
           [[t.total_keyframes, t.min, t.max, t.mean, t.std]])
    post = t.is_post_keyframe & ~t.is_keyframe
    reg = ~t.is_post_keyframe & ~t.is_keyframe
    _write(out / "tracking.csv", ["frames", "mean_ms", "post_keyframe_frames", "post_keyframe_mean_ms",
                                  "regular_frames", "regular_mean_ms"],
           [[len(t.tracking_ms), t.mean_tracking, int(post.sum()), t.mean_post_keyframe,
             int(reg.sum()), t.mean_regular]])


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def summarize(report_dirs) -> list[dict]:
    """One row per report directory: accuracy, keyframe and tracking summaries side by side."""
    out = []
    for d in report_dirs:
        d = Path(d)
        row = {"report": d.name}
        for name, prefix in (("accuracy.csv", ""), ("keyframes.csv", "kf_"), ("tracking.csv", "trk_")):
            p = d / name
            if p.exists():
                rows = read_csv_rows(p)
                if rows:
                    row.update({prefix + k: v for k, v in rows[0].items()})
        out.append(row)
    return out
