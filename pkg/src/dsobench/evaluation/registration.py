"""Point-to-point ICP with optional scale estimation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from ..geometry import Pose, SimilarityTransform
from .cloud import PointCloud

SEARCH_RADIUS = 0.5
RMSE_DELTA = 1e-5
MAX_ITER = 1500


class RegistrationFailed(RuntimeError):
    pass


@dataclass
class RegistrationResult:
    transform: SimilarityTransform
    source_index: np.ndarray
    target_index: np.ndarray
    distances: np.ndarray
    rmse_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def correspondences(self) -> list[tuple[int, int, float]]:
        return list(zip(self.source_index.tolist(), self.target_index.tolist(), self.distances.tolist()))

    @property
    def n_correspondences(self) -> int:
        return len(self.distances)

    @property
    def rmse(self) -> float:
        return self.rmse_trace[-1] if self.rmse_trace else math.nan


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = False) -> SimilarityTransform:
    """Least-squares ``dst ~ s R src + t`` in closed form."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if len(src) != len(dst) or len(src) < 3:
        raise RegistrationFailed("need at least three point pairs")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    A, B = src - mu_s, dst - mu_d
    Sigma = B.T @ A / len(src)
    U, D, Vt = np.linalg.svd(Sigma)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = 1.0
    if with_scale:
        var = float(np.mean(np.sum(A * A, axis=1)))
        if not var > 0:
            raise RegistrationFailed("degenerate source points")
        s = float(np.trace(np.diag(D) @ S)) / var
    t = mu_d - s * R @ mu_s
    return SimilarityTransform(s, Pose(R, t))


def _match(tree: cKDTree, pts: np.ndarray, radius: float):
    d, idx = tree.query(pts, distance_upper_bound=radius)
    ok = np.isfinite(d) & (d <= radius)
    if not ok.any():
        raise RegistrationFailed("no correspondences within the search radius")
    return np.flatnonzero(ok), idx[ok], d[ok]


def icp_align(source: PointCloud, target: PointCloud, search_radius: float = SEARCH_RADIUS,
              rmse_delta: float = RMSE_DELTA, max_iter: int = MAX_ITER, with_scale: bool = False,
              initial: SimilarityTransform | None = None) -> RegistrationResult:
    """Align ``source`` onto ``target``.

    Each iteration pairs every transformed source point with its nearest target
    point within ``search_radius`` and re-solves the alignment in closed form.
    A step that would raise the correspondence RMSE is rejected and ends the
    loop; otherwise iteration stops once RMSE changes by less than
    ``rmse_delta``.
    """
    if len(source) == 0 or len(target) == 0:
        raise RegistrationFailed("empty point cloud")
    T = initial if initial is not None else SimilarityTransform()
    tree = cKDTree(target.points)
    P = source.points
    si, ti, d = _match(tree, T.apply(P), search_radius)
    rmse = math.sqrt(float(np.mean(d * d)))
    res = RegistrationResult(T, si, ti, d, [rmse])
    for _ in range(max_iter):
        if len(si) < 3:
            break
        res.iterations += 1
        cur = T.apply(P[si])
        step = umeyama(cur, target.points[ti], with_scale)
        T_new = step @ T
        si_n, ti_n, d_n = _match(tree, T_new.apply(P), search_radius)
        rmse_new = math.sqrt(float(np.mean(d_n * d_n)))
        if rmse_new > rmse:
            res.converged = True
            break
        T, si, ti, d = T_new, si_n, ti_n, d_n
        res.rmse_trace.append(rmse_new)
        done = abs(rmse - rmse_new) < rmse_delta
        rmse = rmse_new
        if done:
            res.converged = True
            break
    res.transform, res.source_index, res.target_index, res.distances = T, si, ti, d
    return res
