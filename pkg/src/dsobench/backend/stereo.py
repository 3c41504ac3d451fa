"""Rectified stereo matching for depth initialisation."""

from __future__ import annotations

import time

import numpy as np

from ..geometry import Pose, StereoRig
from ..photometric import Frame, select_pixels
from .window import InitializationFailed, Keyframe, SlidingWindowState


def _row_search(ref, other, pix, dvals, r, sign, ratio, chunk):
    """SAD search of ``ref`` patches along the same row of ``other`` at ``u - sign*d``."""
    D = len(dvals)
    pad = r + int(dvals[-1])
    Op = np.pad(other, ((r, r), (pad, pad)), constant_values=np.nan)
    Rp = np.pad(ref, r, constant_values=np.nan)
    offs = np.arange(-r, r + 1)
    disp = np.full(len(pix), np.nan)
    ok = np.zeros(len(pix), dtype=bool)
    for s in range(0, len(pix), chunk):
        u = pix[s:s + chunk, 0]
        v = pix[s:s + chunk, 1]
        rows = (v[:, None] + offs[None, :]) + r                      # (n, w)
        rpatch = Rp[rows[:, :, None], (u[:, None] + offs[None, :] + r)[:, None, :]]    # (n, w, w)
        cols = u[:, None, None] - sign * dvals[None, :, None] + offs[None, None, :] + pad  # (n, D, w)
        opatch = Op[rows[:, None, :, None], cols[:, :, None, :]]     # (n, D, w, w)
        sad = np.abs(opatch - rpatch[:, None]).sum(axis=(2, 3))      # nan where off image
        sad = np.where(np.isnan(sad), np.inf, sad)
        best = np.argmin(sad, axis=1)
        n = len(u)
        c1 = sad[np.arange(n), best]
        masked = sad.copy()
        lo = np.clip(best - 1, 0, D - 1)
        hi = np.clip(best + 1, 0, D - 1)
        for k in (lo, best, hi):
            masked[np.arange(n), k] = np.inf
        second = masked.min(axis=1)
        interior = (best > 0) & (best < D - 1) & np.isfinite(c1) & ~np.isnan(rpatch).any(axis=(1, 2))
        c0 = sad[np.arange(n), lo]
        c2 = sad[np.arange(n), hi]
        with np.errstate(divide="ignore", invalid="ignore"):
            unique = np.where(second > 0, c1 / second, 1.0) <= ratio
            denom = c0 - 2.0 * c1 + c2
            off = np.where(denom > 0, 0.5 * (c0 - c2) / denom, 0.0)
        good = interior & unique & np.isfinite(c0) & np.isfinite(c2) & (np.abs(off) <= 0.5)
        disp[s:s + chunk] = np.where(good, dvals[best] + off, np.nan)
        ok[s:s + chunk] = good
    return disp, ok


def match_stereo(left: np.ndarray, right: np.ndarray, pix: np.ndarray, window: int = 9,
                 min_disparity: float = 1.0, max_disparity: float = 128.0, ratio: float = 0.9,
                 chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """SAD search along the row of each integer pixel ``(u, v)`` in ``pix``.

    The right-image match of left column ``u`` is ``u - disparity``.  Returns
    ``(disparity, ok)``; rejected matches (window off the image, best score at
    the search limit, or best/second-best ratio above ``ratio``) have ``ok``
    false and disparity ``nan``.
    """
    left = np.asarray(left, float)
    right = np.asarray(right, float)
    pix = np.rint(np.asarray(pix, float).reshape(-1, 2)).astype(np.int64)
    r = window // 2
    dvals = np.arange(int(np.ceil(min_disparity)), int(np.floor(max_disparity)) + 1)
    return _row_search(left, right, pix, dvals, r, 1, ratio, chunk)


def stereo_idepth(frame: Frame, pix: np.ndarray, rig: StereoRig, config) -> tuple[np.ndarray, np.ndarray]:
    """Inverse depth ``disparity / (fx B)`` for each candidate pixel."""
    disp, ok = match_stereo(frame.intensity, frame.right, pix, config.sad_window,
                            config.min_disparity, config.max_disparity, config.ratio_test)
    return np.where(ok, disp / rig.bf, np.nan), ok


def initialize_stereo(left: Frame, right, rig: StereoRig, config) -> SlidingWindowState:
    """First keyframe at the world origin with stereo-matched inverse depths."""
    t0 = time.perf_counter()
    if config.mode not in ("stereo", "lite"):
        raise InitializationFailed("stereo initialisation needs stereo or lite mode")
    if right is not None and not isinstance(right, np.ndarray):
        right = right.intensity
    if left.right is None:
        left = Frame(left.id, left.timestamp, left.intensity, exposure=left.exposure,
                     affine_a=left.affine_a, affine_b=left.affine_b, right=right)
    ys, xs, _ = select_pixels(left, config.points_per_keyframe)
    pix = np.column_stack([xs, ys]).astype(float)
    idepth, ok = stereo_idepth(left, pix, rig, config)
    if ok.sum() < 50:
        raise InitializationFailed(f"only {int(ok.sum())} stereo matches")
    state = SlidingWindowState(config.mode, config.window_size, rig.left, rig)
    kf = Keyframe(state.next_keyframe_id, left, Pose.identity(), rig.left, pix[ok], idepth[ok], rig=rig)
    state.next_keyframe_id += 1
    state.add(kf)
    kf.creation_duration = max(time.perf_counter() - t0, 1e-9)
    return state
