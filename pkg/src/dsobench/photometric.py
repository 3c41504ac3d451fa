"""Image pyramids, sub-pixel sampling and the photometric residual.

The per-pixel residual between a host frame ``i`` and a target frame ``j`` is

    r = (I_j[p'] - b_j) - (t_j exp(a_j)) / (t_i exp(a_i)) * (I_i[p] - b_i)

and a point's energy is the sum over its residual pattern of
``w_p * huber(r, gamma)`` where ``w_p`` is a fixed weight computed from the
host-image gradient.  ``p'`` is obtained by transferring every pattern pixel
with the point's single inverse depth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import CameraIntrinsics, Pose, pixel_rays

HUBER_GAMMA = 9.0 / 255.0
GRADIENT_WEIGHT_C = 50.0 / 255.0
MIN_VALID_OFFSETS = 5


class PhotometricError(ValueError):
    pass


class InvalidResidual(PhotometricError):
    pass


# --------------------------------------------------------------------------
# frames


def image_gradient(image: np.ndarray) -> np.ndarray:
    """Central differences inside, one-sided at the borders; ``(H, W, 2)`` as (d/du, d/dv)."""
    gv, gu = np.gradient(image)
    return np.stack([gu, gv], axis=-1)


@dataclass(eq=False)
class Frame:
    id: int
    timestamp: float
    intensity: np.ndarray
    gradient: np.ndarray | None = None
    exposure: float = 1.0
    affine_a: float = 0.0
    affine_b: float = 0.0
    right: np.ndarray | None = None  # rectified right image, stereo data only
    _stack: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        img = np.asarray(self.intensity, dtype=np.float64)
        if img.ndim != 2:
            raise PhotometricError("intensity must be a 2-D array")
        if img.size and (img.min() < 0.0 or img.max() > 1.0):
            raise PhotometricError("intensity must be normalised to [0, 1]")
        if not self.exposure > 0:
            raise PhotometricError("exposure must be positive")
        self.intensity = img
        if self.gradient is None:
            self.gradient = image_gradient(img)
        elif self.gradient.shape != img.shape + (2,):
            raise PhotometricError("gradient shape does not match intensity")
        self._stack = np.concatenate([img[..., None], self.gradient], axis=-1)

    @property
    def height(self) -> int:
        return self.intensity.shape[0]

    @property
    def width(self) -> int:
        return self.intensity.shape[1]

    def sample(self, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bilinear ``[I, dI/du, dI/dv]`` at real pixel positions.

        Returns ``(values (..., 3), inside)``; values outside the image are
        clamped lookups and must be masked by the caller.
        """
        return bilinear(self._stack, u, v)

    def sample_intensity(self, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return bilinear(self.intensity, u, v)

    def right_frame(self) -> "Frame":
        if self.right is None:
            raise PhotometricError(f"frame {self.id} has no right image")
        return Frame(self.id, self.timestamp, self.right, exposure=self.exposure,
                     affine_a=self.affine_a, affine_b=self.affine_b)


def bilinear(stack: np.ndarray, u: np.ndarray, v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bilinear lookup in an ``(H, W)`` or ``(H, W, C)`` array; ``inside`` marks in-image positions."""
    H, W = stack.shape[:2]
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    inside = (u >= 0.0) & (v >= 0.0) & (u <= W - 1) & (v <= H - 1)
    # fmin/fmax map nan onto the clip bounds
    uc = np.fmax(np.fmin(u, W - 1.0), 0.0)
    vc = np.fmax(np.fmin(v, H - 1.0), 0.0)
    x0 = np.minimum(uc.astype(np.int64), W - 2)
    y0 = np.minimum(vc.astype(np.int64), H - 2)
    fx = uc - x0
    fy = vc - y0
    idx = y0 * W + x0
    flat = stack.reshape(H * W, -1) if stack.ndim == 3 else stack.reshape(H * W)
    if stack.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = flat[idx] * (1.0 - fx) + flat[idx + 1] * fx
    bot = flat[idx + W] * (1.0 - fx) + flat[idx + W + 1] * fx
    return top * (1.0 - fy) + bot * fy, inside


def interpolate(frame: Frame, pixel) -> tuple[float, np.ndarray]:
    """Bilinear intensity and gradient at one sub-pixel position."""
    u, v = (float(x) for x in pixel)
    if not (0.0 <= u <= frame.width - 1 and 0.0 <= v <= frame.height - 1):
        raise PhotometricError(f"pixel {(u, v)} outside image")
    vals, _ = frame.sample(np.array(u), np.array(v))
    return float(vals[0]), np.array(vals[1:])


def max_pyramid_levels(width: int, height: int) -> int:
    return int(math.floor(math.log2(min(width, height))))


def downsample(image: np.ndarray) -> np.ndarray:
    """2x2 box filter; odd dimensions are padded by edge replication."""
    H, W = image.shape
    if H % 2 or W % 2:
        image = np.pad(image, ((0, H % 2), (0, W % 2)), mode="edge")
    return 0.25 * (image[0::2, 0::2] + image[1::2, 0::2] + image[0::2, 1::2] + image[1::2, 1::2])


def build_pyramid(frame: Frame, levels: int) -> list[Frame]:
    if levels < 1:
        raise PhotometricError("need at least one pyramid level")
    if levels > max_pyramid_levels(frame.width, frame.height):
        raise PhotometricError(
            f"{levels} levels exceed log2 of the image size {frame.width}x{frame.height}"
        )
    out = [frame]
    img = frame.intensity
    for _ in range(1, levels):
        img = downsample(img)
        out.append(Frame(frame.id, frame.timestamp, img, exposure=frame.exposure,
                         affine_a=frame.affine_a, affine_b=frame.affine_b))
    return out


def pyramid_intrinsics(intr: CameraIntrinsics, levels: int) -> list[CameraIntrinsics]:
    return [intr.scaled(level) for level in range(levels)]


def level_coordinates(uv: np.ndarray, level: int) -> np.ndarray:
    """Map level-0 pixel coordinates onto pyramid ``level``."""
    s = 2.0**level
    return (np.asarray(uv, dtype=float) - 0.5 * (s - 1.0)) / s


# --------------------------------------------------------------------------
# robust cost and weights


def huber(residual, gamma: float = HUBER_GAMMA):
    r = np.abs(np.asarray(residual, dtype=float))
    out = np.where(r <= gamma, r * r, gamma * (2.0 * r - gamma))
    return float(out) if out.ndim == 0 else out


def huber_weight(residual, gamma: float = HUBER_GAMMA):
    """IRLS weight making ``weight * r**2`` match the Huber curvature."""
    r = np.abs(np.asarray(residual, dtype=float))
    with np.errstate(divide="ignore"):
        return np.where(r <= gamma, 1.0, gamma / np.maximum(r, 1e-300))


def gradient_weight(pixel_gradient, c: float = GRADIENT_WEIGHT_C):
    g = np.asarray(pixel_gradient, dtype=float)
    g2 = np.sum(g * g, axis=-1)
    out = c * c / (c * c + g2)
    return float(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# points and pattern


@dataclass(frozen=True, eq=False)
class ResidualPattern:
    offsets: np.ndarray

    def __post_init__(self):
        off = np.asarray(self.offsets, dtype=np.int64).reshape(-1, 2)
        if not np.any(np.all(off == 0, axis=1)):
            raise PhotometricError("pattern must contain the centre pixel")
        if np.any(np.hypot(off[:, 0], off[:, 1]) > 2.0):
            raise PhotometricError("pattern offsets must lie within radius 2")
        off.setflags(write=False)
        object.__setattr__(self, "offsets", off)

    def __len__(self):
        return len(self.offsets)


DSO_PATTERN = ResidualPattern(
    [[0, -2], [-1, -1], [1, -1], [-2, 0], [0, 0], [2, 0], [-1, 1], [0, 2]]
)


class PointStatus(Enum):
    CANDIDATE = "candidate"
    ACTIVE = "active"
    MARGINALIZED = "marginalized"
    DROPPED = "dropped"


@dataclass
class CandidatePoint:
    host_frame_id: int
    pixel: np.ndarray
    inverse_depth: float = float("nan")
    depth_variance: float = float("inf")
    status: PointStatus = PointStatus.CANDIDATE
    gradient_norm: float = 0.0

    @property
    def valid(self) -> bool:
        return bool(np.isfinite(self.inverse_depth) and self.inverse_depth > 0)


# --------------------------------------------------------------------------
# vectorised residual machinery


def brightness_ratio(host_exposure, host_a, target_exposure, target_a):
    return (target_exposure * np.exp(target_a)) / (host_exposure * np.exp(host_a))


@dataclass
class WarpResult:
    uv: np.ndarray        # (N, K, 2) pixels in the target
    xn: np.ndarray        # (N, K) normalised x of the point in the target
    yn: np.ndarray
    iz: np.ndarray        # (N, K) 1 / z in the target
    front: np.ndarray     # (N, K) bool, positive depth in the target
    rho: np.ndarray       # (N, K) d * z -> Y_z, used by the inverse-depth derivative


def warp_pattern(host_pix: np.ndarray, idepth: np.ndarray, rel: Pose,
                 intr: CameraIntrinsics, offsets: np.ndarray) -> WarpResult:
    """Transfer each pattern pixel of every point with its shared inverse depth.

    ``rel`` maps host-camera coordinates into target-camera coordinates.
    """
    pix = host_pix[:, None, :] + offsets[None, :, :]
    rays = pixel_rays(pix, intr)
    d = idepth[:, None, None]
    Y = rays @ rel.rotation.T + rel.translation * d   # d * X_target
    Yz = Y[..., 2]
    front = Yz > 1e-12
    safe = np.where(front, Yz, 1.0)
    xn = Y[..., 0] / safe
    yn = Y[..., 1] / safe
    uv = np.stack([intr.fx * xn + intr.cx, intr.fy * yn + intr.cy], axis=-1)
    iz = idepth[:, None] / safe
    return WarpResult(uv, xn, yn, iz, front, safe)


def pose_jacobian(w: WarpResult, intr: CameraIntrinsics, gu: np.ndarray, gv: np.ndarray) -> np.ndarray:
    """d r / d epsilon for a left perturbation ``exp(eps) * rel``; shape (N, K, 6)."""
    xn, yn, iz = w.xn, w.yn, w.iz
    fgu = gu * intr.fx
    fgv = gv * intr.fy
    J = np.empty(xn.shape + (6,))
    J[..., 0] = fgu * iz
    J[..., 1] = fgv * iz
    J[..., 2] = -(fgu * xn + fgv * yn) * iz
    J[..., 3] = -fgu * xn * yn - fgv * (1.0 + yn * yn)
    J[..., 4] = fgu * (1.0 + xn * xn) + fgv * xn * yn
    J[..., 5] = -fgu * yn + fgv * xn
    return J


def idepth_jacobian(w: WarpResult, rel: Pose, intr: CameraIntrinsics,
                    gu: np.ndarray, gv: np.ndarray) -> np.ndarray:
    t = rel.translation
    du = intr.fx * (t[0] - w.xn * t[2]) / w.rho
    dv = intr.fy * (t[1] - w.yn * t[2]) / w.rho
    return gu * du + gv * dv


@dataclass
class HostPatch:
    """Host-side data of a batch of points: pattern intensities and weights."""

    pix: np.ndarray       # (N, 2)
    values: np.ndarray    # (N, K)
    weights: np.ndarray   # (N, K) gradient weights
    grad: np.ndarray      # (N, K, 2) host gradient

    @classmethod
    def from_frame(cls, frame: Frame, pix: np.ndarray, offsets: np.ndarray) -> "HostPatch":
        pix = np.asarray(pix, dtype=float).reshape(-1, 2)
        pp = pix[:, None, :] + offsets[None, :, :]
        vals, _ = frame.sample(pp[..., 0], pp[..., 1])
        return cls(pix, vals[..., 0], gradient_weight(vals[..., 1:]), vals[..., 1:])

    def subset(self, idx) -> "HostPatch":
        return HostPatch(self.pix[idx], self.values[idx], self.weights[idx], self.grad[idx])


@dataclass
class ResidualBlock:
    """Residuals of a batch of points between one host and one target."""

    r: np.ndarray          # (N, K)
    valid: np.ndarray      # (N, K)
    weights: np.ndarray    # (N, K) gradient weights w_p
    uv: np.ndarray         # (N, K, 2)
    J_pose: np.ndarray | None = None   # (N, K, 6), left perturbation of rel
    J_idepth: np.ndarray | None = None  # (N, K)
    J_aff_host: np.ndarray | None = None  # (N, K, 2) wrt (a_i, b_i)
    J_aff_target: np.ndarray | None = None  # (N, K, 2) wrt (a_j, b_j)
    front: np.ndarray | None = None

    def costs(self, gamma: float = HUBER_GAMMA) -> np.ndarray:
        """Per-residual weighted Huber cost, zero where invalid."""
        return np.where(self.valid, self.weights * huber(self.r, gamma), 0.0)

    def irls(self, gamma: float = HUBER_GAMMA) -> np.ndarray:
        return np.where(self.valid, self.weights * huber_weight(self.r, gamma), 0.0)


def compute_residuals(host: HostPatch, idepth: np.ndarray, rel: Pose, target: Frame,
                      intr: CameraIntrinsics, offsets: np.ndarray,
                      host_affine=(1.0, 0.0, 0.0), target_affine=(1.0, 0.0, 0.0),
                      jacobians: bool = False, margin: float = 1.0) -> ResidualBlock:
    """Residuals (and optionally Jacobians) for every pattern pixel.

    ``host_affine`` / ``target_affine`` are ``(exposure, a, b)`` triples.
    """
    t_i, a_i, b_i = host_affine
    t_j, a_j, b_j = target_affine
    s = brightness_ratio(t_i, a_i, t_j, a_j)
    w = warp_pattern(host.pix, idepth, rel, intr, offsets)
    if jacobians:
        vals, _ = target.sample(w.uv[..., 0], w.uv[..., 1])
        intensity = vals[..., 0]
    else:
        intensity, _ = target.sample_intensity(w.uv[..., 0], w.uv[..., 1])
    valid = w.front & intr.in_bounds(w.uv, margin)
    host_centered = host.values - b_i
    r = (intensity - b_j) - s * host_centered
    block = ResidualBlock(r, valid, host.weights, w.uv, front=w.front)
    if jacobians:
        gu, gv = vals[..., 1], vals[..., 2]
        block.J_pose = pose_jacobian(w, intr, gu, gv)
        block.J_idepth = idepth_jacobian(w, rel, intr, gu, gv)
        block.J_aff_target = np.stack([-s * host_centered, -np.ones_like(r)], axis=-1)
        block.J_aff_host = np.stack([s * host_centered, np.full_like(r, s)], axis=-1)
    return block


def photometric_residual(point: CandidatePoint, host: Frame, target: Frame, relative: Pose,
                         intr: CameraIntrinsics, pattern: ResidualPattern = DSO_PATTERN,
                         gamma: float = HUBER_GAMMA) -> tuple[float, np.ndarray]:
    """Energy of one point between ``host`` and ``target``.

    ``relative`` maps host-camera coordinates into the target camera.  Returns
    ``(cost, residuals)`` with ``nan`` for offsets that left the image.
    Raises :class:`InvalidResidual` when fewer than five offsets are usable.
    """
    if not point.valid:
        raise InvalidResidual("point has no valid inverse depth")
    patch = HostPatch.from_frame(host, np.asarray(point.pixel, dtype=float)[None], pattern.offsets)
    block = compute_residuals(
        patch, np.array([point.inverse_depth]), relative, target, intr, pattern.offsets,
        (host.exposure, host.affine_a, host.affine_b),
        (target.exposure, target.affine_a, target.affine_b),
        margin=0.0,
    )
    valid = block.valid[0]
    if not block.front[0].any():
        raise InvalidResidual("not visible")
    if valid.sum() < MIN_VALID_OFFSETS:
        raise InvalidResidual(f"only {int(valid.sum())} of {len(pattern)} offsets valid")
    cost = float(block.costs(gamma)[0].sum())
    return cost, np.where(valid, block.r[0], np.nan)


# --------------------------------------------------------------------------
# candidate selection

SELECTION_CELL = 32
SELECTION_MARGIN = 7.0 / 255.0
BORDER = 4


def _cell_thresholds(gmag: np.ndarray, cell: int, margin: float) -> np.ndarray:
    H, W = gmag.shape
    thr = np.empty_like(gmag)
    for y in range(0, H, cell):
        for x in range(0, W, cell):
            block = gmag[y:y + cell, x:x + cell]
            thr[y:y + cell, x:x + cell] = np.median(block) + margin
    return thr


def _select_blocks(gmag: np.ndarray, thr: np.ndarray, pot: int, border: int):
    H, W = gmag.shape
    g = gmag.copy()
    g[:border] = 0
    g[-border:] = 0
    g[:, :border] = 0
    g[:, -border:] = 0
    Hb, Wb = H // pot, W // pot
    blocks = g[: Hb * pot, : Wb * pot].reshape(Hb, pot, Wb, pot).transpose(0, 2, 1, 3).reshape(Hb, Wb, pot * pot)
    arg = blocks.argmax(axis=-1)
    by, bx = np.mgrid[0:Hb, 0:Wb]
    ys = by * pot + arg // pot
    xs = bx * pot + arg % pot
    ok = g[ys, xs] > thr[ys, xs]
    return ys[ok], xs[ok]


def select_candidates(frame: Frame, target_count: int, cell: int = SELECTION_CELL,
                      margin: float = SELECTION_MARGIN, border: int = BORDER) -> list[CandidatePoint]:
    """High-gradient pixels spread over the image.

    Thresholds come from ``cell``-sized regions (median gradient plus
    ``margin``); inside each region the strongest pixel of every ``pot x pot``
    block is kept, with ``pot`` adapted so roughly ``target_count`` survive.
    """
    if target_count < 1:
        raise PhotometricError("target_count must be >= 1")
    ys, xs, gmag = select_pixels(frame, target_count, cell, margin, border)
    return [
        CandidatePoint(frame.id, np.array([float(x), float(y)]), gradient_norm=float(gmag[y, x]))
        for y, x in zip(ys, xs)
    ]


def select_pixels(frame: Frame, target_count: int, cell: int = SELECTION_CELL,
                  margin: float = SELECTION_MARGIN, border: int = BORDER):
    """Array form of :func:`select_candidates`: ``(rows, cols, gradient_magnitude)``."""
    gmag = np.linalg.norm(frame.gradient, axis=-1)
    thr = _cell_thresholds(gmag, cell, margin)
    pot = max(1, int(round(math.sqrt(frame.width * frame.height / target_count))))
    tried = set()
    ys, xs = _select_blocks(gmag, thr, pot, border)
    for _ in range(8):
        tried.add(pot)
        n = len(ys)
        if n > 1.25 * target_count:
            pot += 1
        elif n < 0.8 * target_count and pot > 1:
            pot -= 1
        else:
            break
        if pot in tried:
            break
        ys, xs = _select_blocks(gmag, thr, pot, border)
    if len(ys) > target_count:
        keep = np.linspace(0, len(ys) - 1, target_count).round().astype(int)
        ys, xs = ys[keep], xs[keep]
    return ys, xs, gmag
