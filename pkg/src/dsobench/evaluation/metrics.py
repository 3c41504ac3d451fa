"""Accuracy statistics, binned error analyses and timing summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .registration import SEARCH_RADIUS, RegistrationResult

DISTANCE_BIN = 0.025
DEPTH_BIN = 5.0


class MetricsError(ValueError):
    pass


@dataclass
class AccuracyStats:
    n_points: int
    n_correspondences: int
    mean: float
    std: float
    estimated_scale: float | None = None


def _distances(reg) -> np.ndarray:
    if isinstance(reg, RegistrationResult):
        return np.asarray(reg.distances, dtype=float)
    return np.asarray(reg, dtype=float).reshape(-1)


def accuracy_stats(reg, map_size: int, estimated_scale: float | None = None) -> AccuracyStats:
    """Mean distance and population (divide by N) standard deviation.

    ``reg`` is a :class:`RegistrationResult` or the distances themselves.
    """
    d = _distances(reg)
    if len(d) == 0:
        raise MetricsError("no correspondences")
    if len(d) > map_size:
        raise MetricsError("more correspondences than map points")
    n = len(d)
    mean = math.fsum(d) / n
    std = math.sqrt(math.fsum((d - mean) ** 2) / n)
    if estimated_scale is None and isinstance(reg, RegistrationResult) and reg.transform.scale != 1.0:
        estimated_scale = reg.transform.scale
    return AccuracyStats(map_size, n, mean, std, estimated_scale)


@dataclass
class BinnedErrors:
    edges: np.ndarray      # (B + 1,)
    counts: np.ndarray     # (B,)
    mean_error: np.ndarray  # (B,), nan for empty bins

    def rows(self):
        for k in range(len(self.counts)):
            yield self.edges[k], self.edges[k + 1], int(self.counts[k]), float(self.mean_error[k])

    def bin_of(self, value: float) -> int:
        return int(np.searchsorted(self.edges, value, side="right") - 1)


def depth_binned_errors(reg, depths, bin_width: float = DEPTH_BIN) -> BinnedErrors:
    """Correspondence distances grouped by the host-keyframe depth of their source point.

    ``depths`` holds one depth per source point (a :class:`PointCloud` with a
    ``depth`` channel is accepted too); with a registration result the source
    indices select the entries, otherwise ``depths`` pairs with ``reg``
    element-wise.
    """
    if not bin_width > 0:
        raise MetricsError("bin width must be positive")
    depths = getattr(depths, "depth", depths)
    if depths is None:
        raise MetricsError("source points carry no host depth")
    depths = np.asarray(depths, dtype=float).reshape(-1)
    d = _distances(reg)
    if isinstance(reg, RegistrationResult):
        z = depths[reg.source_index]
    else:
        z = depths
    if len(z) != len(d):
        raise MetricsError("depths and distances differ in length")
    top = float(z.max()) if len(z) else 0.0
    nb = max(1, int(math.floor(top / bin_width)) + 1)
    edges = bin_width * np.arange(nb + 1)
    idx = np.clip(np.floor(z / bin_width).astype(np.int64), 0, nb - 1)
    counts = np.bincount(idx, minlength=nb)
    sums = np.bincount(idx, d, minlength=nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return BinnedErrors(edges, counts, mean)


def error_histogram(reg, bin_width: float = DISTANCE_BIN, search_radius: float = SEARCH_RADIUS) -> BinnedErrors:
    """Counts of correspondence distances over ``[0, search_radius]``.

    The last bin is closed so a distance equal to the radius is counted.
    """
    if not bin_width > 0 or not search_radius > 0:
        raise MetricsError("bin width and radius must be positive")
    d = _distances(reg)
    nb = max(1, int(round(search_radius / bin_width)))
    edges = np.linspace(0.0, search_radius, nb + 1)
    idx = np.clip(np.floor(d / (search_radius / nb)).astype(np.int64), 0, nb - 1)
    counts = np.bincount(idx, minlength=nb)
    sums = np.bincount(idx, d, minlength=nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return BinnedErrors(edges, counts, mean)


# --------------------------------------------------------------------------
# timing


@dataclass
class TimingStats:
    total_keyframes: int
    min: float | None
    max: float | None
    mean: float | None
    std: float | None
    tracking_ms: np.ndarray = field(default_factory=lambda: np.zeros(0))
    is_post_keyframe: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))
    is_keyframe: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))

    @property
    def mean_tracking(self) -> float:
        return float(np.mean(self.tracking_ms)) if len(self.tracking_ms) else math.nan

    @property
    def mean_post_keyframe(self) -> float:
        m = self.is_post_keyframe & ~self.is_keyframe
        return float(np.mean(self.tracking_ms[m])) if m.any() else math.nan

    @property
    def mean_regular(self) -> float:
        """Frames that neither became keyframes nor follow one."""
        m = ~self.is_post_keyframe & ~self.is_keyframe
        return float(np.mean(self.tracking_ms[m])) if m.any() else math.nan


def _field(row, name, default=None):
    if isinstance(row, dict):
        return row.get(name, default)
    return getattr(row, name, default)


def timing_stats(keyframe_log, tracking_log=()) -> TimingStats:
    """Keyframe-creation statistics (ms, population std) and the tracking-time bands.

    Rows flagged ``bootstrap`` (the initialisation keyframe) count towards
    the total but not towards min/max/mean/std, since their time is that of
    initialisation rather than keyframe creation.
    """
    rows = list(keyframe_log)
    times = [float(_field(r, "creation_ms")) for r in rows
             if not _as_flag(_field(r, "bootstrap", False))]
    if times:
        t = np.array(times)
        mean = math.fsum(times) / len(times)
        stats = TimingStats(len(rows), float(t.min()), float(t.max()), mean,
                            math.sqrt(math.fsum((t - mean) ** 2) / len(t)))
    else:
        stats = TimingStats(len(rows), None, None, None, None)
    trk = list(tracking_log)
    stats.tracking_ms = np.array([float(_field(r, "tracking_ms")) for r in trk])
    stats.is_post_keyframe = np.array([_as_flag(_field(r, "is_post_keyframe", False)) for r in trk], bool)
    stats.is_keyframe = np.array([_as_flag(_field(r, "is_keyframe", False)) for r in trk], bool)
    return stats


def _as_flag(v) -> bool:
    if isinstance(v, str):
        return v.strip().lower() in ("1", "true", "yes")
    return bool(v)
