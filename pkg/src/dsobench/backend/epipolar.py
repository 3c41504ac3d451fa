"""Epipolar depth tracing for new monocular points.

A fresh mono keyframe only has guessed depths (projections of the window
points, dilated).  Where the guess is wrong by more than the basin of the
photometric optimisation, for example on a roof whose neighbours were ground
points, bundle adjustment cannot repair it, and the bad points bias tracking.
Each guess is therefore checked by a 1-D search over inverse depth against
older keyframes: the energies of all references are summed (multi-baseline
matching) and the minimum must be clearly better than any other.
"""

from __future__ import annotations

import numpy as np

from ..geometry import CameraIntrinsics, Pose, pixel_rays, project_points
from ..photometric import DSO_PATTERN, Frame, HostPatch, compute_residuals, huber

SAMPLES = 48
SPAN = 2.0            # search idepth0 / SPAN .. idepth0 * SPAN
MIN_PARALLAX = 2.0    # px of epipolar segment below which depth is not observable
MIN_QUALITY = 2.0     # second-best energy / best energy
MAX_MEAN_ABS = 2.0    # best mean |r| per pattern pixel, in units of gamma


def _segment_length(pix, lo, hi, rel: Pose, intr: CameraIntrinsics) -> np.ndarray:
    """Pixel length of the epipolar segment between inverse depths ``lo`` and ``hi`` (nan if behind)."""
    rays = pixel_rays(pix, intr)
    ends = []
    for d in (lo, hi):
        X = rays @ rel.rotation.T + rel.translation * d[:, None]
        uv = project_points(X, intr)
        uv[X[:, 2] <= 1e-9] = np.nan
        ends.append(uv)
    return np.linalg.norm(ends[1] - ends[0], axis=1)


def trace_idepth(frame: Frame, pose: Pose, pix: np.ndarray, idepth0: np.ndarray, references,
                 intr: CameraIntrinsics, gamma: float, samples: int = SAMPLES, span: float = SPAN,
                 min_parallax: float = MIN_PARALLAX, min_quality: float = MIN_QUALITY,
                 max_mean_abs: float = MAX_MEAN_ABS) -> tuple[np.ndarray, np.ndarray]:
    """Refine ``idepth0`` (nan = no guess) for the pixels ``pix`` of ``frame`` at ``pose``.

    ``references`` are ``(Frame, Pose)`` pairs of earlier keyframes.  Returns
    ``(idepth, ok)``.  Points whose search segment is shorter than
    ``min_parallax`` pixels in every reference keep their guess: their
    reprojection barely depends on depth.  Ambiguous or badly matching
    points get ``ok`` false.
    """
    pix = np.asarray(pix, float).reshape(-1, 2)
    d0 = np.asarray(idepth0, float).reshape(-1)
    out = d0.copy()
    ok = np.isfinite(d0) & (d0 > 0)
    idx = np.flatnonzero(ok)
    if not len(idx) or not references:
        return out, ok
    p, g = pix[idx], d0[idx]
    factors = span ** np.linspace(-1.0, 1.0, samples)
    patch = HostPatch.from_frame(frame, p, DSO_PATTERN.offsets)
    haff = (frame.exposure, frame.affine_a, frame.affine_b)
    penalty = huber(3.0 * gamma, gamma)
    E = np.zeros((len(idx), samples))
    abs_sum = np.zeros((len(idx), samples))
    n_valid = np.zeros((len(idx), samples))
    observable = np.zeros(len(idx), dtype=bool)
    for ref_frame, ref_pose in references:
        rel = ref_pose.inverse() @ pose
        seg = _segment_length(p, g / span, g * span, rel, intr)
        use = np.isfinite(seg) & (seg >= min_parallax)
        observable |= use
        taff = (ref_frame.exposure, ref_frame.affine_a, ref_frame.affine_b)
        for j, f in enumerate(factors):
            b = compute_residuals(patch, g * f, rel, ref_frame, intr, DSO_PATTERN.offsets, haff, taff)
            c = np.where(b.valid, b.weights * huber(b.r, gamma), b.weights * penalty).sum(axis=1)
            E[:, j] += np.where(use, c, 0.0)
            abs_sum[:, j] += np.where(use, np.sum(np.abs(b.r) * b.valid, axis=1), 0.0)
            n_valid[:, j] += np.where(use, b.valid.sum(axis=1), 0)
    rows = np.arange(len(idx))
    best = np.argmin(E, axis=1)
    e1 = E[rows, best]
    # second best away from the minimum's own basin
    masked = E.copy()
    near = np.abs(np.arange(samples)[None, :] - best[:, None]) <= max(2, samples // 16)
    masked[near] = np.inf
    e2 = masked.min(axis=1)
    interior = (best > 0) & (best < samples - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        quality = np.where(e1 > 0, e2 / e1, np.inf)
        mean_abs = abs_sum[rows, best] / np.maximum(n_valid[rows, best], 1)
    good = interior & (quality >= min_quality) & (mean_abs <= max_mean_abs * gamma)
    # parabola through the neighbouring samples, in log idepth
    lo = np.clip(best - 1, 0, samples - 1)
    hi = np.clip(best + 1, 0, samples - 1)
    c0, c2 = E[rows, lo], E[rows, hi]
    denom = c0 - 2.0 * e1 + c2
    with np.errstate(divide="ignore", invalid="ignore"):
        off = np.where(denom > 0, 0.5 * (c0 - c2) / denom, 0.0)
    step = 2.0 * np.log(span) / (samples - 1)
    traced = g * factors[best] * np.exp(np.clip(off, -0.5, 0.5) * step)
    out[idx] = np.where(observable, traced, g)
    ok[idx] = ~observable | good
    out[~ok] = np.nan
    return out, ok
