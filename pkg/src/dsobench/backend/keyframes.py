"""Keyframe decision, creation, eviction and map export."""

from __future__ import annotations

import time

import numpy as np
from scipy import ndimage

from ..evaluation.cloud import PointCloud
from ..geometry import project_points
from ..photometric import Frame, select_pixels
from ..tracking import TrackingResult, splat_depth
from .ba import bundle_adjust_window
from .epipolar import trace_idepth
from .stereo import stereo_idepth
from .window import (
    ACTIVE,
    DROPPED,
    MARGINALIZED,
    BundleAdjustmentError,
    Keyframe,
    KeyframeCreationFailed,
    SlidingWindowState,
)

MIN_VISIBLE_FRACTION = 0.05
KEEP_NEWEST = 2
TRACE_REFERENCES = 2   # newest window keyframes searched when tracing mono depths


def keyframe_decision(result: TrackingResult, reference: Keyframe, config) -> bool:
    if result.mean_flow > config.kf_flow_threshold:
        return True
    if config.kf_flow_only:
        return False
    if abs(result.affine_a - reference.frame.affine_a) > config.kf_brightness_threshold:
        return True
    return result.valid_residual_fraction < config.kf_min_valid_fraction


def projected_idepth(window: SlidingWindowState, pose, pix: np.ndarray, max_gap: float = 40.0):
    """Inverse depth at ``pix`` from the window points seen from ``pose``.

    Empty pixels take the value of the nearest filled one (dilation); pixels
    farther than ``max_gap`` from any projection get nan (no point is made).
    """
    intr = window.intrinsics
    Tinv = pose.inverse()
    xs, ds = [], []
    for kf in window.keyframes:
        m = kf.active
        if not m.any():
            continue
        X = Tinv.apply(kf.world_points(m))
        front = X[:, 2] > 1e-6
        uv = project_points(X[front], intr)
        ok = intr.in_bounds(uv)
        xs.append(uv[ok])
        ds.append(1.0 / X[front][ok, 2])
    if not xs or not sum(len(x) for x in xs):
        return np.full(len(pix), np.nan)
    uv, d = np.concatenate(xs), np.concatenate(ds)
    sparse = splat_depth(uv, d, intr.width, intr.height)
    empty = ~(sparse > 0)
    dist, (iy, ix) = ndimage.distance_transform_edt(empty, return_indices=True)
    dense = sparse[iy, ix]
    dense[dist > max_gap] = np.nan
    p = np.rint(pix).astype(int)
    return dense[p[:, 1], p[:, 0]]


def create_keyframe(window: SlidingWindowState, frame: Frame, tracking: TrackingResult,
                    rig=None, config=None) -> Keyframe:
    """Insert ``frame`` into the window, optimise, and evict if overfull.

    Raises :class:`KeyframeCreationFailed` if bundle adjustment breaks down;
    the window is then restored to its previous contents.
    """
    t0 = time.perf_counter()
    rig = rig if rig is not None else window.rig
    frame.affine_a, frame.affine_b = tracking.affine_a, tracking.affine_b
    ys, xs, _ = select_pixels(frame, config.points_per_keyframe)
    pix = np.column_stack([xs, ys]).astype(float)
    if config.stereo:
        if rig is None or frame.right is None:
            raise KeyframeCreationFailed("stereo keyframe needs a right image and a rig")
        idepth, ok = stereo_idepth(frame, pix, rig, config)
    else:
        guess = projected_idepth(window, tracking.pose, pix)
        refs = [(k.frame, k.pose) for k in window.keyframes[-TRACE_REFERENCES:]]
        idepth, ok = trace_idepth(frame, tracking.pose, pix, guess, refs, window.intrinsics, config.huber_gamma)
    kf = Keyframe(window.next_keyframe_id, frame, tracking.pose, window.intrinsics, pix[ok], idepth[ok],
                  rig=rig if config.stereo else None)
    backup = _snapshot(window)
    window.add(kf)
    try:
        bundle_adjust_window(window, config)
    except BundleAdjustmentError as exc:
        window.keyframes.pop()
        _restore(window, backup)
        raise KeyframeCreationFailed(str(exc)) from exc
    window.next_keyframe_id += 1
    if len(window) > window.window_size:
        evict_keyframe(window, config)
    kf.creation_duration = max(time.perf_counter() - t0, 1e-9)
    return kf


def _snapshot(window):
    return [(kf, kf.pose, kf.frame.affine_a, kf.frame.affine_b, kf.idepth.copy(), kf.status.copy(),
             kf.hdd.copy(), kf.n_obs.copy(), {k: v.copy() for k, v in kf.blacklist.items()})
            for kf in window.keyframes]


def _restore(window, snap):
    for kf, pose, a, b, d, st, hdd, nobs, bl in snap:
        kf.pose = pose
        kf.frame.affine_a, kf.frame.affine_b = a, b
        kf.idepth, kf.status, kf.hdd, kf.n_obs, kf.blacklist = d, st, hdd, nobs, bl


def visible_fraction(kf: Keyframe, target: Keyframe) -> float:
    m = kf.active
    if not m.any():
        return 0.0
    X = target.pose.inverse().apply(kf.world_points(m))
    front = X[:, 2] > 1e-6
    uv = project_points(X[front], kf.intrinsics)
    return float(kf.intrinsics.in_bounds(uv).sum()) / len(X)


def eviction_candidate(window: SlidingWindowState) -> int:
    """Index of the keyframe to remove; the two newest are never chosen."""
    kfs = window.keyframes
    cand = list(range(len(kfs) - KEEP_NEWEST))
    newest = kfs[-1]
    for i in cand:
        if visible_fraction(kfs[i], newest) < MIN_VISIBLE_FRACTION:
            return i
    centres = np.array([kf.pose.translation for kf in kfs])
    # spread of the window: frames close to others (and far from the newest) go first
    scale = max(float(np.linalg.norm(centres[-1] - centres[0])), 1e-9)
    eps = 1e-5 * scale
    best, best_score = cand[0], -np.inf
    for i in cand:
        dist = np.linalg.norm(centres - centres[i], axis=1)
        others = [j for j in range(len(kfs) - 1) if j != i]
        score = np.sqrt(dist[-1] + eps) * np.sum(1.0 / (dist[others] + eps))
        if score > best_score:
            best, best_score = i, score
    return best


def exportable(kf: Keyframe, config) -> np.ndarray:
    """Active points whose relative inverse-depth std and observation count pass the thresholds."""
    var = kf.variance(config.noise_sigma)
    with np.errstate(invalid="ignore"):
        rel_std = np.sqrt(var) / np.maximum(kf.idepth, 1e-12)
    return kf.active & (kf.n_obs >= config.export_min_observations) & (rel_std < config.export_max_rel_std)


def _export(window: SlidingWindowState, kf: Keyframe, mask: np.ndarray) -> None:
    if mask.any():
        window.exported.append(kf.world_points(mask), kf.color[mask] * 255.0,
                               1.0 / kf.idepth[mask], kf.id)


def evict_keyframe(window: SlidingWindowState, config):
    """Remove one keyframe, exporting its well-constrained points.

    Returns ``(points, colors, host_depth)`` of the exported points.
    """
    i = eviction_candidate(window)
    kf = window.keyframes.pop(i)
    keep = exportable(kf, config)
    _export(window, kf, keep)
    out = (kf.world_points(keep), kf.color[keep] * 255.0, 1.0 / kf.idepth[keep])
    kf.status[keep] = MARGINALIZED
    kf.status[kf.status == ACTIVE] = DROPPED
    for other in window.keyframes:
        other.blacklist.pop(kf.id, None)
    if i == 0 and window.mode == "mono":
        anchor_scale(window.keyframes[0])
    return out


def anchor_scale(kf: Keyframe) -> None:
    """Inverse-depth prior on a new gauge keyframe; keeps the monocular scale from drifting."""
    m = kf.active & (kf.hdd > 0)
    kf.prior_idepth[m] = kf.idepth[m]
    kf.prior_weight[m] = kf.hdd[m]


def export_map(window: SlidingWindowState | None, config=None) -> PointCloud:
    """Exported points plus the still-active, well-constrained window points."""
    if window is None:
        return PointCloud.empty("map")
    pts, col, depth, _ = window.exported.arrays()
    P, C, D = [pts], [col], [depth]
    for kf in window.keyframes:
        m = exportable(kf, config) if config is not None else kf.active
        if m.any():
            P.append(kf.world_points(m))
            C.append(kf.color[m] * 255.0)
            D.append(1.0 / kf.idepth[m])
    return PointCloud(np.concatenate(P), np.concatenate(C), "map", np.concatenate(D))
