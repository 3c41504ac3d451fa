"""Coarse-to-fine direct alignment of incoming frames against a reference keyframe.

Two variants share the residual model:

* ``forward``: Jacobians are evaluated on the incoming frame at every iteration
  and the relative pose is updated as ``T <- exp(delta) T``;
* ``inverse``: Jacobians and the Hessian are computed once on the reference
  image and reused; the update composes on the reference side,
  ``T <- T exp(delta)``.

``T`` maps reference-camera coordinates into the tracked camera.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraIntrinsics, Pose, pixel_rays
from .photometric import (
    HUBER_GAMMA,
    Frame,
    brightness_ratio,
    build_pyramid,
    gradient_weight,
    huber,
    huber_weight,
    level_coordinates,
    pose_jacobian,
)


class TrackingLost(RuntimeError):
    pass


@dataclass
class TrackerConfig:
    levels: int = 4
    max_iterations: int = 50
    tolerance: float = 1e-6
    gamma: float = HUBER_GAMMA
    min_valid_fraction: float = 0.3
    max_rejections: int = 5
    lm_lambda: float = 1e-4
    affine_prior: float = 1e-4      # per point, pulls (a, b) towards zero
    outlier_penalty: float = 3.0    # invalid residuals cost as much as |r| = 3 gamma
    margin: float = 1.0
    divergence_rms: float = 3.0 * HUBER_GAMMA


@dataclass
class ReferenceView:
    """What the tracker needs from a keyframe: image, pose and a sparse depth map."""

    frame: Frame
    pose: Pose                   # camera to world
    pix: np.ndarray              # (N, 2) level-0 pixels
    idepth: np.ndarray           # (N,)


@dataclass
class TrackingResult:
    frame_id: int
    pose: Pose
    affine_a: float
    affine_b: float
    final_cost: float
    valid_residual_fraction: float
    duration: float
    is_post_keyframe: bool = False
    relative: Pose = field(default_factory=Pose)   # reference camera -> frame camera
    mean_flow: float = 0.0
    iterations: int = 0
    level_costs: list = field(default_factory=list)

    def __post_init__(self):
        if self.final_cost < 0:
            raise ValueError("final cost must be non-negative")
        if not 0.0 <= self.valid_residual_fraction <= 1.0:
            raise ValueError("valid fraction must lie in [0, 1]")


@dataclass
class _Level:
    intr: CameraIntrinsics
    pix: np.ndarray        # (M, 2) pixel positions at this level
    X: np.ndarray          # (M, 3) points in the reference camera
    values: np.ndarray     # (M,)
    grad: np.ndarray       # (M, 2)
    weights: np.ndarray    # (M,) gradient weights
    J: np.ndarray | None = None      # (M, 8) inverse-mode Jacobian
    H: np.ndarray | None = None      # (8, 8) inverse-mode Hessian


def splat_depth(pix: np.ndarray, idepth: np.ndarray, width: int, height: int) -> np.ndarray:
    """Average inverse depth per integer pixel; 0 where empty."""
    u = np.rint(pix[:, 0]).astype(np.int64)
    v = np.rint(pix[:, 1]).astype(np.int64)
    ok = (u >= 0) & (v >= 0) & (u < width) & (v < height) & (idepth > 0)
    flat = v[ok] * width + u[ok]
    s = np.bincount(flat, idepth[ok], minlength=width * height)
    c = np.bincount(flat, minlength=width * height)
    out = np.zeros(width * height)
    np.divide(s, c, out=out, where=c > 0)
    return out.reshape(height, width)


def _downsample_depth(d: np.ndarray) -> np.ndarray:
    H, W = d.shape
    if H % 2 or W % 2:
        d = np.pad(d, ((0, H % 2), (0, W % 2)))
    s = d[0::2, 0::2] + d[1::2, 0::2] + d[0::2, 1::2] + d[1::2, 1::2]
    n = ((d[0::2, 0::2] > 0).astype(int) + (d[1::2, 0::2] > 0) + (d[0::2, 1::2] > 0) + (d[1::2, 1::2] > 0))
    out = np.zeros_like(s)
    np.divide(s, n, out=out, where=n > 0)
    return out


def predict_pose(history) -> Pose:
    """Constant-velocity extrapolation of the last two camera-to-world poses."""
    poses = [h.pose if isinstance(h, TrackingResult) else h for h in history]
    if not poses:
        return Pose.identity()
    if len(poses) == 1:
        return poses[-1]
    prev, last = poses[-2], poses[-1]
    return last @ (prev.inverse() @ last)


class Tracker:
    def __init__(self, intr: CameraIntrinsics, config: TrackerConfig | None = None, mode: str = "forward"):
        if mode not in ("forward", "inverse"):
            raise ValueError(f"unknown tracking mode {mode!r}")
        self.intr = intr
        self.config = config or TrackerConfig()
        self.mode = mode
        self._source = None
        self._ref: ReferenceView | None = None
        self._levels: list[_Level] = []

    # -- reference handling ------------------------------------------------

    def set_reference(self, source) -> None:
        """Register a new reference; the expensive preparation runs on the next track."""
        self._source = source
        self._ref = None
        self._levels = []

    @property
    def reference(self) -> ReferenceView | None:
        return self._ref

    def _prepare(self) -> None:
        src = self._source
        ref = src if isinstance(src, ReferenceView) else src.reference_view()
        cfg = self.config
        pyr = build_pyramid(ref.frame, cfg.levels)
        depth = splat_depth(np.asarray(ref.pix, float), np.asarray(ref.idepth, float),
                            self.intr.width, self.intr.height)
        levels = []
        for lvl in range(cfg.levels):
            intr = self.intr.scaled(lvl)
            img = pyr[lvl]
            if lvl > 0:
                depth = _downsample_depth(depth)
            v, u = np.nonzero(depth[: img.height, : img.width])
            pix = np.column_stack([u, v]).astype(float)
            inside = intr.in_bounds(pix, cfg.margin)
            pix = pix[inside]
            d = depth[v[inside], u[inside]]
            X = pixel_rays(pix, intr) / d[:, None]
            vals, _ = img.sample(pix[:, 0], pix[:, 1])
            L = _Level(intr, pix, X, vals[:, 0], vals[:, 1:], gradient_weight(vals[:, 1:]))
            if self.mode == "inverse":
                self._precompute_inverse(L, ref)
            levels.append(L)
        if len(levels[0].pix) < 50:
            raise TrackingLost(f"reference has only {len(levels[0].pix)} points with depth")
        self._ref = ref
        self._levels = levels
        self._ref_pyr = pyr

    def _precompute_inverse(self, L: _Level, ref: ReferenceView) -> None:
        X = L.X
        iz = 1.0 / X[:, 2]
        w = _Warp(X[:, 0] * iz, X[:, 1] * iz, iz)
        J = np.empty((len(X), 8))
        J[:, :6] = pose_jacobian(w, L.intr, L.grad[:, 0], L.grad[:, 1])
        J[:, 6] = -(L.values - ref.frame.affine_b)
        J[:, 7] = -1.0
        L.J = J
        L.H = (J * L.weights[:, None]).T @ J

    # -- residuals -----------------------------------------------------------

    def _evaluate(self, L: _Level, img: Frame, T: Pose, aff: np.ndarray, frame: Frame,
                  need_grad: bool):
        ref = self._ref
        cfg = self.config
        Y = L.X @ T.rotation.T + T.translation
        z = Y[:, 2]
        front = z > 1e-9
        iz = np.where(front, 1.0 / np.where(front, z, 1.0), 0.0)
        xn, yn = Y[:, 0] * iz, Y[:, 1] * iz
        uv = np.column_stack([L.intr.fx * xn + L.intr.cx, L.intr.fy * yn + L.intr.cy])
        valid = front & L.intr.in_bounds(uv, cfg.margin)
        vals, _ = img.sample(uv[:, 0], uv[:, 1])
        s = brightness_ratio(ref.frame.exposure, ref.frame.affine_a, frame.exposure, aff[0])
        hc = L.values - ref.frame.affine_b
        r = (vals[:, 0] - aff[1]) - s * hc
        r = np.where(valid, r, 0.0)
        out = dict(r=r, valid=valid, uv=uv, s=s, hc=hc)
        if need_grad:
            out["warp"] = _Warp(xn, yn, iz)
            out["gu"] = vals[:, 1]
            out["gv"] = vals[:, 2]
        return out

    def _energy(self, L: _Level, ev: dict, aff: np.ndarray) -> float:
        cfg = self.config
        g = cfg.gamma
        e = np.where(ev["valid"], L.weights * huber(ev["r"], g), L.weights * huber(cfg.outlier_penalty * g, g))
        return float(e.sum()) + cfg.affine_prior * len(L.X) * float(aff @ aff)

    # -- main loop -------------------------------------------------------------

    def track(self, frame: Frame, initial_guess: Pose, initial_affine=(0.0, 0.0),
              is_post_keyframe: bool = False) -> TrackingResult:
        t0 = time.perf_counter()
        if self._source is None:
            raise TrackingLost("no reference set")
        if not np.all(np.isfinite(initial_guess.matrix)):
            raise TrackingLost("initial guess is not finite")
        if self._ref is None:
            self._prepare()
        ref = self._ref
        cfg = self.config
        pyr = build_pyramid(frame, cfg.levels)
        T = initial_guess.inverse() @ ref.pose
        aff = np.array(initial_affine, dtype=float)
        total_iters = 0
        level_costs = []
        for lvl in range(cfg.levels - 1, -1, -1):
            L = self._levels[lvl]
            if len(L.X) == 0:
                continue
            T, aff, cost, iters = self._optimize_level(L, pyr[lvl], frame, T, aff, lvl == 0)
            total_iters += iters
            level_costs.append(cost)
        L = self._levels[0]
        ev = self._evaluate(L, pyr[0], T, aff, frame, False)
        valid = ev["valid"]
        frac = float(valid.mean()) if len(valid) else 0.0
        if frac < cfg.min_valid_fraction:
            raise TrackingLost(f"only {frac:.0%} of residuals valid")
        final_cost = float(np.sum(np.where(valid, L.weights * huber(ev["r"], cfg.gamma), 0.0)))
        flow = float(np.linalg.norm(ev["uv"][valid] - L.pix[valid], axis=1).mean()) if valid.any() else 0.0
        pose = ref.pose @ T.inverse()
        return TrackingResult(
            frame.id, pose, float(aff[0]), float(aff[1]), final_cost, frac,
            max(time.perf_counter() - t0, 1e-9), is_post_keyframe, T, flow, total_iters, level_costs,
        )

    def _normal_equations(self, L: _Level, ev: dict):
        cfg = self.config
        valid = ev["valid"]
        h = np.where(valid, huber_weight(ev["r"], cfg.gamma), 0.0)
        W = L.weights * h
        if self.mode == "forward":
            J = np.empty((len(L.X), 8))
            J[:, :6] = pose_jacobian(ev["warp"], L.intr, ev["gu"], ev["gv"])
            J[:, 6] = -ev["s"] * ev["hc"]
            J[:, 7] = -1.0
            H = (J * W[:, None]).T @ J
        else:
            J = L.J
            corr = h < 1.0
            Jc = J[corr]
            H = L.H - (Jc * (L.weights[corr] * (1.0 - h[corr]))[:, None]).T @ Jc
        g = J.T @ (W * ev["r"])
        return H, g

    def _optimize_level(self, L: _Level, img: Frame, frame: Frame, T: Pose, aff: np.ndarray,
                        finest: bool = True):
        cfg = self.config
        prior = cfg.affine_prior * len(L.X)
        ev = self._evaluate(L, img, T, aff, frame, self.mode == "forward")
        cost = self._energy(L, ev, aff)
        lam = cfg.lm_lambda
        rejections = 0
        iters = 0
        H, g = self._normal_equations(L, ev)
        while iters < cfg.max_iterations:
            iters += 1
            A = H + lam * np.diag(np.diag(H))
            A[6, 6] += prior
            A[7, 7] += prior
            rhs = g.copy()
            rhs[6:] += prior * aff
            try:
                delta = -np.linalg.solve(A, rhs)
            except np.linalg.LinAlgError:
                raise TrackingLost("singular tracking system") from None
            if not np.all(np.isfinite(delta)):
                raise TrackingLost("non-finite tracking increment")
            step = Pose.exp(delta[:6])
            T_new = step @ T if self.mode == "forward" else T @ step
            aff_new = aff + delta[6:]
            ev_new = self._evaluate(L, img, T_new, aff_new, frame, self.mode == "forward")
            cost_new = self._energy(L, ev_new, aff_new)
            small = float(np.linalg.norm(delta)) < cfg.tolerance
            if cost_new <= cost:
                T, aff, ev, cost = T_new, aff_new, ev_new, cost_new
                lam = max(lam * 0.5, 1e-8)
                rejections = 0
                if small:
                    break
                H, g = self._normal_equations(L, ev)
            else:
                if small or cost_new - cost <= 1e-9 * max(cost, 1e-300):
                    break
                rejections += 1
                lam *= 4.0
                if rejections >= cfg.max_rejections:
                    # damped retries made no progress: a minimum unless the
                    # residuals are still large
                    valid = ev["valid"]
                    rms = math.sqrt(float(np.mean(ev["r"][valid] ** 2))) if valid.any() else math.inf
                    if finest and rms > cfg.divergence_rms:
                        raise TrackingLost("tracking diverged")
                    break
        return T, aff, cost, iters


@dataclass
class _Warp:
    xn: np.ndarray
    yn: np.ndarray
    iz: np.ndarray


def track_frame(frame: Frame, reference, initial_guess: Pose, mode: str = "forward",
                intr: CameraIntrinsics | None = None, config: TrackerConfig | None = None) -> TrackingResult:
    """One-shot tracking of ``frame`` against ``reference`` (a ReferenceView or a
    keyframe-like object exposing ``reference_view()`` and ``intrinsics``)."""
    if intr is None:
        intr = reference.intrinsics
    tracker = Tracker(intr, config, mode)
    tracker.set_reference(reference)
    return tracker.track(frame, initial_guess,
                         (reference.frame.affine_a, reference.frame.affine_b)
                         if isinstance(reference, ReferenceView) else (0.0, 0.0))
