"""Monocular bootstrap from two frames with random initial inverse depths."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from ..geometry import CameraIntrinsics, Pose
from ..photometric import (
    DSO_PATTERN,
    MIN_VALID_OFFSETS,
    Frame,
    HostPatch,
    build_pyramid,
    compute_residuals,
    huber,
    huber_weight,
    level_coordinates,
    select_pixels,
)
from .window import InitializationFailed, Keyframe, SlidingWindowState


@dataclass
class InitSettings:
    idepth_range: tuple[float, float] = (0.01, 1.0)
    neighbours: int = 8
    smoothing: tuple[float, ...] = (1.0, 0.3, 0.1, 0.03, 0.003)   # coarse .. fine, relative to median H_dd
    iterations: tuple[int, ...] = (40, 30, 20, 15, 10)
    max_rms: float = 1.2      # final RMS residual, units of gamma
    min_valid: float = 0.5
    min_parallax: float = 0.01  # |t| * mean inverse depth
    affine_prior: float = 1e6   # pulls (a, b) towards zero; brightness barely changes between two frames


def _level_patch(frame: Frame, pix0: np.ndarray, level: int) -> HostPatch:
    return HostPatch.from_frame(frame, level_coordinates(pix0, level), DSO_PATTERN.offsets)


def _schur_step(Hcc, gc, Hcp, Hdd, gd, lam):
    Hdd_l = Hdd * (1.0 + lam)
    inv = np.where(Hdd_l > 1e-12, 1.0 / np.maximum(Hdd_l, 1e-300), 0.0)
    A = Hcc + lam * np.diag(np.diag(Hcc)) + 1e-9 * np.eye(len(gc))
    S = A - (Hcp * inv) @ Hcp.T
    rhs = gc - Hcp @ (inv * gd)
    dc = -np.linalg.solve(S, rhs)
    dd = -inv * (gd + Hcp.T @ dc)
    return dc, dd


class _InitProblem:
    def __init__(self, first, second, intr, level, pix0, gamma, nbr, alpha, aff_prior):
        self.intr = intr.scaled(level)
        self.patch = _level_patch(first, pix0, level)
        self.target = second
        self.gamma = gamma
        self.nbr = nbr
        self.alpha = alpha
        self.aff_prior = aff_prior

    def residuals(self, T, aff, d, jac):
        return compute_residuals(self.patch, d, T, self.target, self.intr, DSO_PATTERN.offsets,
                                 (1.0, 0.0, 0.0), (1.0, aff[0], aff[1]), jacobians=jac)

    def energy(self, T, aff, d, dbar, reg):
        b = self.residuals(T, aff, d, False)
        pen = huber(3.0 * self.gamma, self.gamma)
        E = np.where(b.valid, b.weights * huber(b.r, self.gamma), b.weights * pen).sum()
        return float(E + np.sum(reg * (d - dbar) ** 2) + self.aff_prior * float(aff @ aff))

    def linearize(self, T, aff, d):
        b = self.residuals(T, aff, d, True)
        ok = b.valid & (b.valid.sum(axis=1) >= MIN_VALID_OFFSETS)[:, None]
        W = np.where(ok, b.weights * huber_weight(b.r, self.gamma), 0.0)
        J = np.concatenate([b.J_pose, b.J_aff_target], axis=-1)       # (N, K, 8)
        JW = J * W[..., None]
        Hcc = JW.reshape(-1, 8).T @ J.reshape(-1, 8)
        gc = JW.reshape(-1, 8).T @ b.r.reshape(-1)
        Hcc[6:, 6:] += self.aff_prior * np.eye(2)
        gc[6:] += self.aff_prior * aff
        Hcp = np.einsum("nki,nk->in", JW, b.J_idepth)
        Hdd = np.sum(W * b.J_idepth ** 2, axis=1)
        gd = np.sum(W * b.J_idepth * b.r, axis=1)
        return Hcc, gc, Hcp, Hdd, gd, b


def initialize_mono(first: Frame, second: Frame, config, rng: np.random.Generator | None = None,
                    intr: CameraIntrinsics | None = None, settings: InitSettings | None = None):
    """Jointly estimate the pose of ``second`` and inverse depths of points in ``first``.

    Depths start uniform in ``settings.idepth_range`` and are refined coarse
    to fine; the result is normalised to a unit-length translation.  Returns
    a window holding the first frame as a keyframe at the world origin;
    ``state.bootstrap_pose`` is the camera-to-world pose of ``second``.
    """
    if intr is None:
        raise InitializationFailed("intrinsics required")
    settings = settings or InitSettings()
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    t0 = time.perf_counter()
    ys, xs, _ = select_pixels(first, config.points_per_keyframe)
    if len(ys) < 50:
        raise InitializationFailed(f"only {len(ys)} candidate pixels")
    pix0 = np.column_stack([xs, ys]).astype(float)
    N = len(pix0)
    d = rng.uniform(*settings.idepth_range, size=N)
    mean0 = float(d.mean())
    tree = cKDTree(pix0)
    k = min(settings.neighbours + 1, N)
    _, nbr = tree.query(pix0, k=k)
    nbr = nbr[:, 1:]
    levels = min(config.init_levels, len(settings.smoothing))
    pyr1 = build_pyramid(first, levels)
    pyr2 = build_pyramid(second, levels)
    T = Pose.identity()
    aff = np.zeros(2)
    gamma = config.huber_gamma
    for level in range(levels - 1, -1, -1):
        prob = _InitProblem(pyr1[level], pyr2[level], intr, level, pix0, gamma, nbr,
                            settings.smoothing[level], settings.affine_prior)
        lam = 1e-3
        Hcc, gc, Hcp, Hdd, gd, _ = prob.linearize(T, aff, d)
        reg = settings.smoothing[level] * max(float(np.median(Hdd[Hdd > 0])) if np.any(Hdd > 0) else 1.0, 1e-6)
        dbar = d[nbr].mean(axis=1)
        E = prob.energy(T, aff, d, dbar, reg)
        for _ in range(settings.iterations[min(level, len(settings.iterations) - 1)]):
            Hdd_r = Hdd + reg
            gd_r = gd + reg * (d - dbar)
            try:
                dc, dd = _schur_step(Hcc, gc, Hcp, Hdd_r, gd_r, lam)
            except np.linalg.LinAlgError:
                raise InitializationFailed("singular initialisation system") from None
            T_new = Pose.exp(dc[:6]) @ T
            aff_new = aff + dc[6:]
            d_new = np.where(d + dd > 1e-4, d + dd, 0.5 * d)
            # hold the mean inverse depth fixed: removes the scale gauge freedom
            c = float(d_new.mean()) / mean0
            d_new = d_new / c
            T_new = Pose(T_new.rotation, T_new.translation * c)
            E_new = prob.energy(T_new, aff_new, d_new, dbar / c, reg)
            if E_new <= E:
                rel = (E - E_new) / max(E, 1e-300)
                T, aff, d = T_new, aff_new, d_new
                lam = max(lam * 0.5, 1e-8)
                dbar = d[nbr].mean(axis=1)
                Hcc, gc, Hcp, Hdd, gd, _ = prob.linearize(T, aff, d)
                E = prob.energy(T, aff, d, dbar, reg)
                if rel < 1e-6:
                    break
            else:
                lam *= 4.0
                if lam > 1e8:
                    break
    # quality checks on the finest level
    Hcc, gc, Hcp, Hdd, gd, block = prob.linearize(T, aff, d)
    nv = block.valid.sum(axis=1)
    usable = nv >= MIN_VALID_OFFSETS
    if usable.mean() < settings.min_valid:
        raise InitializationFailed(f"only {usable.mean():.0%} of points visible in the second frame")
    r = block.r[block.valid & usable[:, None]]
    rms = math.sqrt(float(np.mean(r * r))) / gamma if r.size else math.inf
    if not rms < settings.max_rms:
        raise InitializationFailed(f"residual RMS {rms:.2f} gamma too large")
    t = T.translation
    tn = float(np.linalg.norm(t))
    if tn * float(d.mean()) < settings.min_parallax:
        raise InitializationFailed("not enough parallax")
    mean_abs = np.sum(np.abs(block.r) * block.valid, axis=1) / np.maximum(nv, 1)
    keep = usable & (mean_abs < 3.0 * gamma) & (Hdd > 0)
    if keep.sum() < 50:
        raise InitializationFailed(f"only {int(keep.sum())} inlier points")
    # unit translation convention
    d = d * tn
    Hdd = Hdd / (tn * tn)
    T = Pose(T.rotation, t / tn)
    state = SlidingWindowState("mono", config.window_size, intr, None)
    kf = Keyframe(state.next_keyframe_id, first, Pose.identity(), intr, pix0[keep], d[keep])
    kf.hdd[:] = Hdd[keep]
    kf.n_obs[:] = 2
    first.affine_a = first.affine_b = 0.0
    second.affine_a, second.affine_b = float(aff[0]), float(aff[1])
    state.next_keyframe_id += 1
    state.add(kf)
    state.bootstrap_pose = T.inverse()
    kf.creation_duration = max(time.perf_counter() - t0, 1e-9)
    return state
