"""Map accuracy against ground truth and timing summaries."""

from .cloud import CloudError, PointCloud, read_cloud, read_map, read_pcd, read_ply, write_map, write_pcd, write_ply
from .fusion import fuse_ground_truth
from .metrics import (
    AccuracyStats,
    BinnedErrors,
    MetricsError,
    TimingStats,
    accuracy_stats,
    depth_binned_errors,
    error_histogram,
    timing_stats,
)
from .registration import RegistrationFailed, RegistrationResult, icp_align, umeyama
from .report import (
    EvaluationReport,
    evaluate_map,
    gauge_scale,
    initial_alignment,
    summarize,
    trajectory_scale,
    write_report,
    write_timing,
)

__all__ = [
    "AccuracyStats", "BinnedErrors", "CloudError", "EvaluationReport", "MetricsError", "PointCloud",
    "RegistrationFailed", "RegistrationResult", "TimingStats", "accuracy_stats", "depth_binned_errors",
    "error_histogram", "evaluate_map", "fuse_ground_truth", "gauge_scale", "icp_align",
    "initial_alignment", "read_cloud", "read_map", "read_pcd", "read_ply", "summarize", "timing_stats",
    "trajectory_scale", "umeyama", "write_map", "write_pcd", "write_ply", "write_report", "write_timing",
]
